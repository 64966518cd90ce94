"""Shared domain types: images, masks, label maps, tags, manifest entries.

Images, masks and label maps are carried as plain numpy arrays; the
``validate_*`` helpers enforce the contracts at module boundaries.
Conventions:

- image: float array (H, W, 3), values in [0, 1]
- binary mask: uint8 array (H, W), values in {0, 1}
- label map: uint8 array (H, W), values in {0 target, 1 non-target,
  2 background}; every index carries exactly one label
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputValidationError

LABEL_TARGET = 0
LABEL_NON_TARGET = 1
LABEL_BACKGROUND = 2


def validate_image(image: np.ndarray) -> np.ndarray:
    """Check the image contract and return the array as float32."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InputValidationError(f"image must be (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 8 or arr.shape[1] < 8:
        raise InputValidationError(f"image sides must be >= 8, got {arr.shape[:2]}")
    arr = arr.astype(np.float32, copy=False)
    if not np.all(np.isfinite(arr)):
        raise InputValidationError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InputValidationError("image values must lie in [0, 1]")
    return arr


def validate_mask(mask: np.ndarray, image_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Check the binary-mask contract and return the array as uint8."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise InputValidationError(f"mask must be 2-D, got shape {arr.shape}")
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0, 1))):
        raise InputValidationError(f"mask values must be in {{0,1}}, got {vals.tolist()}")
    if image_shape is not None and tuple(arr.shape) != tuple(image_shape):
        raise InputValidationError(
            f"mask shape {arr.shape} does not match image shape {tuple(image_shape)}"
        )
    return arr.astype(np.uint8, copy=False)


def validate_label_map(labels: np.ndarray) -> np.ndarray:
    """Check the ternary label-map contract and return the array as uint8."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise InputValidationError(f"label map must be 2-D, got shape {arr.shape}")
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (LABEL_TARGET, LABEL_NON_TARGET, LABEL_BACKGROUND))):
        raise InputValidationError(f"label values must be in {{0,1,2}}, got {vals.tolist()}")
    return arr.astype(np.uint8, copy=False)


def _norm_tags(tags) -> list[str]:
    return [str(t).strip() for t in tags if str(t).strip()]


@dataclass
class TagReport:
    """Tag classification for one image-mask pair.

    ``target_tag`` names the masked object, ``non_target_tags`` the visible
    objects that must not be regenerated, and ``background_tags`` the
    occluded objects or scene components behind the target.
    """

    target_tag: str
    non_target_tags: list[str] = field(default_factory=list)
    background_tags: list[str] = field(default_factory=list)
    raw_response: str = ""

    def __post_init__(self):
        self.target_tag = str(self.target_tag).strip()
        self.non_target_tags = _norm_tags(self.non_target_tags)
        self.background_tags = _norm_tags(self.background_tags)
        if not self.target_tag:
            raise InputValidationError("target_tag must be non-empty")
        groups = {
            "target": [self.target_tag],
            "non_target": self.non_target_tags,
            "background": self.background_tags,
        }
        seen: dict[str, str] = {}
        for group, tags in groups.items():
            for tag in tags:
                key = tag.lower()
                if key in seen and seen[key] != group:
                    raise InputValidationError(
                        f"tag {tag!r} appears in both {seen[key]!r} and {group!r}"
                    )
                if key in seen and seen[key] == group:
                    raise InputValidationError(f"duplicate tag {tag!r} in {group!r} list")
                seen[key] = group

    def to_dict(self) -> dict:
        return {
            "target": self.target_tag,
            "non_target": list(self.non_target_tags),
            "background": list(self.background_tags),
            "raw_response": self.raw_response,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TagReport":
        return cls(
            target_tag=d["target"],
            non_target_tags=d.get("non_target", []),
            background_tags=d.get("background", []),
            raw_response=d.get("raw_response", ""),
        )


@dataclass(frozen=True)
class SampleManifestEntry:
    """One row of a dataset manifest (JSON lines)."""

    sample_id: str
    image_path: Path
    label_mask_path: Path
    result_path: Path | None = None

    def __post_init__(self):
        if not self.sample_id:
            raise InputValidationError("sample_id must be non-empty")
        for p in (self.image_path, self.label_mask_path):
            if not Path(p).is_file():
                raise InputValidationError(f"manifest path does not resolve: {p}")
