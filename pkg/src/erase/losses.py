"""Test-time adaptation objectives over latents and cross-attention maps.

Four terms: a background reconstruction loss anchoring the denoised
latent to the input latent on confident background indices, and a
two-part puzzle loss (alignment + diversity) that shapes how background
subtype attention covers the masked region. All terms are torch ops, so
gradients flow to the denoised latent and to the raw attention maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateRegionError, InputValidationError
from .regions import dice
from .types import LABEL_BACKGROUND, LABEL_NON_TARGET, LABEL_TARGET, validate_label_map

DEFAULT_TAU = 100.0
DEFAULT_LAMBDA = 0.2


@dataclass
class AttentionStack:
    """Per-subtype cross-attention maps over latent indices.

    ``raw`` holds the backbone's per-tag maps (n_tags, h, w);
    ``normalized`` is the temperature softmax across tags at each index,
    so values sum to 1 over tags; ``dominant`` is the pointwise max of
    the normalized maps.
    """

    subtype_order: list[str]
    raw: torch.Tensor
    normalized: torch.Tensor
    dominant: torch.Tensor
    tau: float

    def __post_init__(self):
        if len(self.subtype_order) < 1:
            raise InputValidationError("attention stack needs at least one subtype")
        if self.raw.shape[0] != len(self.subtype_order):
            raise InputValidationError(
                f"{len(self.subtype_order)} subtypes but raw stack has "
                f"{self.raw.shape[0]} maps"
            )


def normalize_attention(
    raw: torch.Tensor | np.ndarray,
    subtype_order: list[str],
    tau: float = DEFAULT_TAU,
) -> AttentionStack:
    """Temperature-scaled softmax across tags at each spatial index.

    Computed with per-index max subtraction for overflow safety; the
    result is shift-invariant in the raw maps.
    """
    if len(subtype_order) == 0:
        raise InputValidationError("cannot normalize an empty tag set")
    if not torch.is_tensor(raw):
        raw = torch.as_tensor(np.asarray(raw))
    if raw.ndim != 3:
        raise InputValidationError(f"raw attention must be (n_tags, h, w), got {tuple(raw.shape)}")
    if raw.shape[0] != len(subtype_order):
        raise InputValidationError(
            f"raw stack has {raw.shape[0]} maps for {len(subtype_order)} subtypes"
        )
    if not torch.all(torch.isfinite(raw)):
        raise InputValidationError("raw attention contains non-finite values")

    scaled = tau * raw
    shifted = scaled - scaled.max(dim=0, keepdim=True).values
    exp = torch.exp(shifted)
    normalized = exp / exp.sum(dim=0, keepdim=True)
    dominant = normalized.max(dim=0).values
    return AttentionStack(
        subtype_order=list(subtype_order),
        raw=raw,
        normalized=normalized,
        dominant=dominant,
        tau=float(tau),
    )


def recon_loss(z: torch.Tensor, z_hat: torch.Tensor, labels: np.ndarray) -> torch.Tensor:
    """Mean squared channel-vector distance over background indices.

    ``z`` and ``z_hat`` are (h, w, c); ``labels`` is a ternary map at the
    same latent resolution. Indices labeled non-background are ignored.
    """
    if z.shape != z_hat.shape:
        raise InputValidationError(f"latent shape mismatch: {tuple(z.shape)} vs {tuple(z_hat.shape)}")
    labels = validate_label_map(labels)
    if tuple(labels.shape) != tuple(z.shape[:2]):
        raise InputValidationError(
            f"label map {labels.shape} does not match latent grid {tuple(z.shape[:2])}"
        )
    bg = torch.as_tensor(labels == LABEL_BACKGROUND)
    if not bool(bg.any()):
        raise DegenerateRegionError("no background indices; scene is degenerate")
    sq = ((z_hat - z) ** 2).sum(dim=-1)
    return sq[bg].mean()


def _valid_indicator(labels: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    valid = (labels == LABEL_TARGET) | (labels == LABEL_BACKGROUND)
    return torch.as_tensor(valid, dtype=like.dtype, device=like.device)


def align_loss(att: AttentionStack, labels: np.ndarray) -> torch.Tensor:
    """1 - Dice(dominant map, indicator of valid indices).

    Valid indices are target or background; concentrating background
    attention outside non-target foregrounds drives this toward 0.
    """
    labels = validate_label_map(labels)
    if tuple(labels.shape) != tuple(att.dominant.shape):
        raise InputValidationError(
            f"label map {labels.shape} does not match attention grid {tuple(att.dominant.shape)}"
        )
    indicator = _valid_indicator(labels, att.dominant)
    return 1.0 - dice(att.dominant, indicator)


def div_loss(att: AttentionStack, labels: np.ndarray) -> torch.Tensor:
    """1 - min over subtypes of their peak attention inside the mask.

    Every subtype must attain a strong response somewhere in the target
    region, so no single subtype can dominate the reconstruction.
    """
    labels = validate_label_map(labels)
    if tuple(labels.shape) != tuple(att.normalized.shape[1:]):
        raise InputValidationError(
            f"label map {labels.shape} does not match attention grid "
            f"{tuple(att.normalized.shape[1:])}"
        )
    mask = torch.as_tensor(labels == LABEL_TARGET)
    if not bool(mask.any()):
        raise DegenerateRegionError("no target indices; diversity loss undefined")
    in_mask = att.normalized[:, mask]  # (n_tags, n_mask_indices)
    peaks = in_mask.max(dim=1).values
    return 1.0 - peaks.min()


@dataclass
class LossBreakdown:
    """All objective terms for one adaptation step.

    Fields are 0-dim torch tensors while a graph is alive; ``floats()``
    detaches them for logging. ``l_puzzle = l_align + l_div`` and
    ``l_total = l_recon + lam * l_puzzle`` hold exactly.
    """

    l_recon: torch.Tensor
    l_align: torch.Tensor
    l_div: torch.Tensor
    l_puzzle: torch.Tensor
    l_total: torch.Tensor
    lam: float
    puzzle_skipped: bool = False

    def floats(self) -> dict:
        def item(t: torch.Tensor) -> float:
            return float(t.detach())

        out = {
            "l_recon": item(self.l_recon),
            "l_align": item(self.l_align),
            "l_div": item(self.l_div),
            "l_puzzle": item(self.l_puzzle),
            "l_total": item(self.l_total),
            "lambda": self.lam,
        }
        if self.puzzle_skipped:
            out["puzzle_skipped"] = True
        return out


def total_loss(
    z: torch.Tensor,
    z_hat: torch.Tensor,
    att: AttentionStack | None,
    labels: np.ndarray,
    lam: float = DEFAULT_LAMBDA,
) -> LossBreakdown:
    """Combine reconstruction and puzzle terms with weight ``lam``.

    With no background subtypes (``att`` is None) the puzzle terms are
    zero and flagged as skipped rather than raising.
    """
    l_rec = recon_loss(z, z_hat, labels)
    if att is None:
        zero = torch.zeros((), dtype=l_rec.dtype, device=l_rec.device)
        l_puzzle = zero + zero
        return LossBreakdown(
            l_recon=l_rec,
            l_align=zero,
            l_div=zero,
            l_puzzle=l_puzzle,
            l_total=l_rec + lam * l_puzzle,
            lam=float(lam),
            puzzle_skipped=True,
        )
    l_align = align_loss(att, labels)
    l_div = div_loss(att, labels)
    l_puzzle = l_align + l_div
    return LossBreakdown(
        l_recon=l_rec,
        l_align=l_align,
        l_div=l_div,
        l_puzzle=l_puzzle,
        l_total=l_rec + lam * l_puzzle,
        lam=float(lam),
    )
