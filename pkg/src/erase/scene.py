"""Synthetic scenes with exact labels and paired ground truth.

Each scene is two textured background subtypes (horizontal stripes on
the left of a seam, a checkerboard on the right) with one solid target
square painted on top. The ground-truth background image is the scene
without the target, so paired metrics are exact by construction. An
optional solid distractor square exercises the non-target label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .regions import build_label_map
from .types import LABEL_BACKGROUND, LABEL_NON_TARGET, LABEL_TARGET

STRIPE_TAG = "stripes"
CHECKER_TAG = "checker"


@dataclass
class SyntheticScene:
    """A generated sample: inputs, exact labels, and paired ground truth."""

    image: np.ndarray
    label_map: np.ndarray
    target_mask: np.ndarray
    non_target_mask: np.ndarray
    gt_background: np.ndarray
    background_tags: list[str]
    seed: int

    @property
    def tag_report(self):
        from .types import TagReport

        return TagReport(
            target_tag="target-square",
            non_target_tags=["distractor-square"] if self.non_target_mask.any() else [],
            background_tags=list(self.background_tags),
        )


def _distinct_colors(rng: np.random.Generator, n: int) -> np.ndarray:
    """Sample colors pairwise separated in RGB space."""
    colors = [rng.uniform(0.05, 0.95, size=3)]
    while len(colors) < n:
        candidate = rng.uniform(0.05, 0.95, size=3)
        if min(np.abs(candidate - c).max() for c in colors) > 0.25:
            colors.append(candidate)
    return np.stack(colors)


def generate_scene(
    seed: int,
    size: int = 64,
    with_distractor: bool = False,
) -> SyntheticScene:
    """Deterministically build a scene; same seed, same bytes."""
    rng = np.random.default_rng(seed)
    colors = _distinct_colors(rng, 6)
    stripe_a, stripe_b, check_a, check_b, target_color, distractor_color = colors

    seam = int(rng.integers(size * 3 // 8, size * 5 // 8))
    yy, xx = np.mgrid[0:size, 0:size]
    stripes = np.where(((yy // 4) % 2 == 0)[..., None], stripe_a, stripe_b)
    checker = np.where((((yy // 4) + (xx // 4)) % 2 == 0)[..., None], check_a, check_b)
    gt = np.where((xx < seam)[..., None], stripes, checker).astype(np.float32)

    non_target = np.zeros((size, size), dtype=np.uint8)
    if with_distractor:
        d_side = int(rng.integers(6, 10))
        dy = int(rng.integers(0, size - d_side))
        dx = int(rng.integers(0, size - d_side))
        gt[dy : dy + d_side, dx : dx + d_side] = distractor_color
        non_target[dy : dy + d_side, dx : dx + d_side] = 1

    t_side = int(rng.integers(12, 21))
    ty = int(rng.integers(4, size - t_side - 4))
    tx = int(rng.integers(4, size - t_side - 4))
    target = np.zeros((size, size), dtype=np.uint8)
    target[ty : ty + t_side, tx : tx + t_side] = 1

    image = gt.copy()
    image[target == 1] = target_color

    labels = build_label_map(target, non_target)
    assert set(np.unique(labels)) <= {LABEL_TARGET, LABEL_NON_TARGET, LABEL_BACKGROUND}
    return SyntheticScene(
        image=image,
        label_map=labels,
        target_mask=target,
        non_target_mask=non_target,
        gt_background=gt,
        background_tags=[STRIPE_TAG, CHECKER_TAG],
        seed=int(seed),
    )
