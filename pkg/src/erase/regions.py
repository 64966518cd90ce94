"""Label-map algebra: ternary region labeling and soft Dice overlap.

The three-label scheme assigns each spatial index exactly one of
{0 target, 1 non-target foreground, 2 background}; target wins on
overlap. Downsampling to latent resolution is a per-cell majority vote
with priority tie-breaking and a non-erasure override that guarantees a
non-empty target region survives.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateRegionError, InputValidationError
from .types import (
    LABEL_BACKGROUND,
    LABEL_NON_TARGET,
    LABEL_TARGET,
    validate_label_map,
    validate_mask,
)

DICE_EPS = 1e-6


def build_label_map(target: np.ndarray, non_target: np.ndarray) -> np.ndarray:
    """Combine target and non-target binary masks into a ternary label map.

    Label 0 where target=1, label 1 where non_target=1 and target=0,
    label 2 elsewhere; the target mask takes priority on overlap.
    """
    target = validate_mask(target)
    non_target = validate_mask(non_target, target.shape)
    labels = np.full(target.shape, LABEL_BACKGROUND, dtype=np.uint8)
    labels[non_target == 1] = LABEL_NON_TARGET
    labels[target == 1] = LABEL_TARGET
    return labels


def decode_label_map(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a label map back into (target, non_target) binary masks."""
    labels = validate_label_map(labels)
    return (
        (labels == LABEL_TARGET).astype(np.uint8),
        (labels == LABEL_NON_TARGET).astype(np.uint8),
    )


def downsample_label_map(labels: np.ndarray, latent_h: int, latent_w: int) -> np.ndarray:
    """Reduce a pixel-resolution label map to latent resolution.

    Each latent cell takes the majority label of its pixel block, ties
    broken by priority 0 > 1 > 2. Pixel row r maps to cell r*latent_h//H
    (contiguous blocks, uneven sizes allowed when dims do not divide).
    If the target region is non-empty at pixel resolution but the vote
    erased it, the cell covering the most target pixels is forced to 0.
    """
    labels = validate_label_map(labels)
    h, w = labels.shape
    if latent_h < 1 or latent_w < 1:
        raise InputValidationError("latent dims must be >= 1")
    if latent_h > h or latent_w > w:
        raise InputValidationError(
            f"latent dims ({latent_h}, {latent_w}) exceed pixel dims ({h}, {w})"
        )

    cell_y = (np.arange(h) * latent_h) // h
    cell_x = (np.arange(w) * latent_w) // w
    # per-cell histogram over the three labels
    counts = np.zeros((latent_h, latent_w, 3), dtype=np.int64)
    yy = np.repeat(cell_y, w)
    xx = np.tile(cell_x, h)
    np.add.at(counts, (yy, xx, labels.reshape(-1)), 1)

    # majority with priority 0 > 1 > 2: argmax scans labels in order and
    # keeps the first maximum, which is exactly the priority rule
    out = np.argmax(counts, axis=2).astype(np.uint8)

    target_pixels = int(np.sum(labels == LABEL_TARGET))
    if target_pixels > 0 and not np.any(out == LABEL_TARGET):
        flat = counts[:, :, LABEL_TARGET].reshape(-1)
        best = int(np.argmax(flat))  # first best cell in row-major order
        out[best // latent_w, best % latent_w] = LABEL_TARGET
    return out


def dice(x, y, eps: float = DICE_EPS):
    """Soft Dice overlap 2*sum(x*y) / (sum(x) + sum(y) + eps).

    Accepts numpy arrays or torch tensors with values in [0, 1]; with
    torch inputs the result stays differentiable.
    """
    if hasattr(x, "detach"):  # torch tensor path, keep the graph intact
        if x.shape != y.shape:
            raise InputValidationError(f"dice shape mismatch: {x.shape} vs {y.shape}")
        _check_unit_range(float(x.detach().min()), float(x.detach().max()))
        _check_unit_range(float(y.detach().min()), float(y.detach().max()))
        return 2.0 * (x * y).sum() / (x.sum() + y.sum() + eps)

    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InputValidationError(f"dice shape mismatch: {x.shape} vs {y.shape}")
    if x.size:
        _check_unit_range(float(x.min()), float(x.max()))
        _check_unit_range(float(y.min()), float(y.max()))
    return float(2.0 * np.sum(x * y) / (np.sum(x) + np.sum(y) + eps))


def _check_unit_range(lo: float, hi: float) -> None:
    if lo < 0.0 or hi > 1.0:
        raise InputValidationError(f"soft-map values must lie in [0, 1], got [{lo}, {hi}]")


def region_indices(labels: np.ndarray) -> dict[str, np.ndarray]:
    """Boolean index sets used by losses and metrics.

    background = label 2, target = label 0, foreground = labels {0, 1},
    unmasked = labels != 0.
    """
    labels = validate_label_map(labels)
    return {
        "background": labels == LABEL_BACKGROUND,
        "target": labels == LABEL_TARGET,
        "foreground": (labels == LABEL_TARGET) | (labels == LABEL_NON_TARGET),
        "unmasked": labels != LABEL_TARGET,
    }


def require_nonempty(mask: np.ndarray, name: str) -> np.ndarray:
    if not np.any(mask):
        raise DegenerateRegionError(f"{name} region is empty")
    return mask
