"""Removal-quality metrics behind a pluggable feature extractor.

Unpaired metrics compare feature-space similarity between the
reconstructed mask region and the background/foreground of the input;
background preservation is windowed SSIM over the unmasked area. Paired
metrics (PSNR/SSIM, optional perceptual slot) compare against ground
truth over the reconstructed region only.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateRegionError, InputValidationError, ResponseParseError
from .types import validate_image, validate_label_map
from .regions import region_indices

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class FeatureExtractor(Protocol):
    def extract(self, region_image: np.ndarray) -> np.ndarray: ...


class ToyFeatureExtractor:
    """Seeded channel-histogram features projected to a fixed dimension.

    Stands in for a pretrained feature backbone in desk-scale runs.
    Pixels that are exactly zero in all channels are treated as padding
    from the region restriction and excluded from the statistics.
    """

    def __init__(self, bins: int = 8, dim: int = 32, seed: int = 0):
        self.bins = bins
        self.dim = dim
        raw_dim = 3 * bins + 8
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((raw_dim, dim)) / np.sqrt(raw_dim)

    def extract(self, region_image: np.ndarray) -> np.ndarray:
        img = validate_image(region_image).astype(np.float64)
        present = img.sum(axis=2) > 0
        n_present = int(present.sum())
        feats = []
        for c in range(3):
            vals = img[:, :, c][present]
            hist, _ = np.histogram(vals, bins=self.bins, range=(0.0, 1.0))
            feats.append(hist / max(1, n_present))
        stats = np.zeros(8)
        if n_present:
            pix = img[present]
            stats[0:3] = pix.mean(axis=0)
            stats[3:6] = pix.std(axis=0)
        stats[6] = n_present / present.size
        stats[7] = 1.0
        raw = np.concatenate(feats + [stats])
        return raw @ self._proj


@dataclass(frozen=True)
class RegionSets:
    """Boolean index sets derived from a ternary label map."""

    background: np.ndarray  # label 2
    reconstructed: np.ndarray  # label 0
    foreground: np.ndarray  # labels {0, 1}
    unmasked: np.ndarray  # labels != 0

    @classmethod
    def from_label_map(cls, labels: np.ndarray) -> "RegionSets":
        labels = validate_label_map(labels)
        idx = region_indices(labels)
        sets = cls(
            background=idx["background"],
            reconstructed=idx["target"],
            foreground=idx["foreground"],
            unmasked=idx["unmasked"],
        )
        sets.check()
        return sets

    def check(self) -> None:
        if np.any(self.reconstructed & ~self.foreground):
            raise InputValidationError("reconstructed region must lie inside foreground")
        if np.any(self.background & self.foreground):
            raise InputValidationError("background and foreground overlap")
        if not np.all(self.background | self.foreground):
            raise InputValidationError("background and foreground must cover all indices")
        if not np.array_equal(self.unmasked, ~self.reconstructed):
            raise InputValidationError("unmasked region must complement the target region")


def restrict_region(image: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Crop to the region's bounding box with out-of-region pixels zeroed."""
    image = validate_image(image)
    region = np.asarray(region, dtype=bool)
    if region.shape != image.shape[:2]:
        raise InputValidationError("region mask shape does not match image")
    if not region.any():
        raise DegenerateRegionError("cannot restrict to an empty region")
    ys, xs = np.nonzero(region)
    y0, y1 = ys.min(), ys.max() + 1
    x0, x1 = xs.min(), xs.max() + 1
    crop = image[y0:y1, x0:x1].copy()
    crop[~region[y0:y1, x0:x1]] = 0.0
    return crop


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; identical vectors score exactly 1.0."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InputValidationError("feature dimensions differ")
    if np.array_equal(a, b):
        return 0.0 if not a.any() else 1.0
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def bg_sim(
    f: FeatureExtractor,
    input_image: np.ndarray,
    output_image: np.ndarray,
    regions: RegionSets,
) -> float:
    """Feature cosine between input background and reconstructed output region."""
    ref = f.extract(restrict_region(input_image, regions.background))
    out = f.extract(restrict_region(output_image, regions.reconstructed))
    return cosine(ref, out)


def fg_sim(
    f: FeatureExtractor,
    input_image: np.ndarray,
    output_image: np.ndarray,
    regions: RegionSets,
    bg: float | None = None,
) -> float:
    """(1 - bg_sim) weighted foreground-feature cosine.

    Pass ``bg`` to reuse an already computed background similarity; when
    it equals 1 the result is exactly 0 regardless of the cosine term.
    """
    if bg is None:
        bg = bg_sim(f, input_image, output_image, regions)
    weight = 1.0 - bg
    if weight == 0.0:
        return 0.0
    ref = f.extract(restrict_region(input_image, regions.foreground))
    out = f.extract(restrict_region(output_image, regions.reconstructed))
    return weight * cosine(ref, out)


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim_map(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Per-window SSIM over all fully covered window positions.

    Gaussian-weighted window statistics, 11x11, sigma 1.5; returns a map
    of shape (H-10, W-10) whose entry (i, j) scores the window centered
    at pixel (i+5, j+5). Multichannel inputs average over channels.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InputValidationError("ssim inputs must share a shape")
    if x.ndim == 3:
        maps = [ssim_map(x[:, :, c], y[:, :, c], data_range) for c in range(x.shape[2])]
        return np.mean(maps, axis=0)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise InputValidationError(
            f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for windowed SSIM"
        )
    kernel = _gaussian_kernel()
    wx = sliding_window_view(x, kernel.shape)
    wy = sliding_window_view(y, kernel.shape)
    mx = np.einsum("ijkl,kl->ij", wx, kernel)
    my = np.einsum("ijkl,kl->ij", wy, kernel)
    exx = np.einsum("ijkl,kl->ij", wx * wx, kernel)
    eyy = np.einsum("ijkl,kl->ij", wy * wy, kernel)
    exy = np.einsum("ijkl,kl->ij", wx * wy, kernel)
    vx = exx - mx * mx
    vy = eyy - my * my
    cxy = exy - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def _windowed_ssim_over(x: np.ndarray, y: np.ndarray, centers: np.ndarray) -> float:
    smap = ssim_map(x, y)
    pad = (SSIM_WINDOW - 1) // 2
    inner = centers[pad:-pad, pad:-pad]
    if not inner.any():
        raise DegenerateRegionError("no fully covered SSIM window centers in region")
    return float(smap[inner].mean())


def bg_pres(input_image: np.ndarray, output_image: np.ndarray, regions: RegionSets) -> float:
    """SSIM averaged over windows centered in the unmasked region."""
    x = validate_image(input_image)
    y = validate_image(output_image)
    if x.shape != y.shape:
        raise InputValidationError("images must share a shape")
    return _windowed_ssim_over(x, y, regions.unmasked)


def psnr(prediction: np.ndarray, ground_truth: np.ndarray, region: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB over an optional region; inf if equal."""
    pred = validate_image(prediction)
    gt = validate_image(ground_truth)
    if pred.shape != gt.shape:
        raise InputValidationError("images must share a shape")
    diff = (pred.astype(np.float64) - gt.astype(np.float64)) ** 2
    if region is not None:
        region = np.asarray(region, dtype=bool)
        if not region.any():
            raise DegenerateRegionError("empty region for PSNR")
        diff = diff[region]
    mse = float(diff.mean())
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


class PerceptualMetric(Protocol):
    def distance(self, a: np.ndarray, b: np.ndarray) -> float: ...


def paired_metrics(
    prediction: np.ndarray,
    ground_truth: np.ndarray,
    regions: RegionSets,
    perceptual: PerceptualMetric | None = None,
) -> dict:
    """PSNR and SSIM over the reconstructed region; perceptual slot optional."""
    pred = validate_image(prediction)
    gt = validate_image(ground_truth)
    out = {
        "psnr": psnr(pred, gt, regions.reconstructed),
        "ssim": _windowed_ssim_over(pred, gt, regions.reconstructed),
    }
    out["lpips"] = perceptual.distance(pred, gt) if perceptual is not None else None
    return out


def judge_metric(client, input_image, output_image, target_description: str) -> tuple[bool, float]:
    """Parse an external judge verdict into (success, 0-100 score)."""
    raw = client.judge(input_image, output_image, target_description)
    try:
        payload = json.loads(raw)
        success = bool(payload["success"])
        score = float(payload["score"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ResponseParseError(f"unparseable judge verdict: {exc}", raw_text=raw) from exc
    if not (0.0 <= score <= 100.0):
        raise ResponseParseError(f"judge score {score} outside [0, 100]", raw_text=raw)
    return success, score


_CSV_COLUMNS = [
    ("sample_id", None),
    ("bg_sim", "BG Sim."),
    ("fg_sim", "FG Sim."),
    ("bg_pres", "BG Pres."),
    ("psnr", "PSNR"),
    ("ssim", "SSIM"),
    ("lpips", "LPIPS"),
    ("status", None),
]


@dataclass
class MetricsReport:
    """Per-sample metric rows plus an aggregate mean row."""

    rows: list[dict]

    _NUMERIC = ("bg_sim", "fg_sim", "bg_pres", "psnr", "ssim", "lpips")

    def aggregate(self) -> dict:
        agg: dict = {"sample_id": "mean", "status": "aggregate"}
        for key in self._NUMERIC:
            vals = [r[key] for r in self.rows if r.get(key) is not None]
            agg[key] = sum(vals) / len(vals) if vals else None
        return agg

    @staticmethod
    def _fmt(value) -> str:
        if value is None:
            return ""
        if isinstance(value, float):
            if value != value or value in (float("inf"), float("-inf")):
                return str(value)
            return f"{value:.6f}"
        return str(value)

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([header or key for key, header in _CSV_COLUMNS])
            for row in [*self.rows, self.aggregate()]:
                writer.writerow([self._fmt(row.get(key)) for key, _ in _CSV_COLUMNS])

    def write_json(self, path: str | Path) -> None:
        payload = {"samples": self.rows, "aggregate": self.aggregate()}
        Path(path).write_text(
            json.dumps(payload, sort_keys=True, indent=2, allow_nan=True) + "\n",
            encoding="utf-8",
        )


def compute_sample_metrics(
    input_image: np.ndarray,
    output_image: np.ndarray,
    labels: np.ndarray,
    extractor: FeatureExtractor,
    ground_truth: np.ndarray | None = None,
    perceptual: PerceptualMetric | None = None,
) -> dict:
    """One report row: unpaired metrics, plus paired metrics when GT exists."""
    regions = RegionSets.from_label_map(labels)
    bg = bg_sim(extractor, input_image, output_image, regions)
    row = {
        "bg_sim": bg,
        "fg_sim": fg_sim(extractor, input_image, output_image, regions, bg=bg),
        "bg_pres": bg_pres(input_image, output_image, regions),
        "psnr": None,
        "ssim": None,
        "lpips": None,
        "status": "ok",
    }
    if ground_truth is not None:
        row.update(paired_metrics(output_image, ground_truth, regions, perceptual))
    return row
