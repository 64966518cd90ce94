"""File formats: PNG images/masks, JSONL manifests, named-tensor archives.

Three-label mask files are 8-bit single-channel PNGs whose pixel values
are exactly 0 (target), 1 (non-target), 2 (background); anything else is
a hard ingestion error. Manifests are one JSON object per line with keys
``sample_id``, ``image``, ``label_mask`` and optional ``result``.

The named-tensor archive is a little-endian float32 container: a 4-byte
length-prefixed JSON header listing (name, shape) in payload order,
followed by the raw tensor bytes. The same framing is used by the
backbone shim protocol.
"""

from __future__ import annotations

import json
import struct
from io import BytesIO
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import InputValidationError
from .types import SampleManifestEntry, validate_image, validate_label_map, validate_mask

_MAGIC = b"NTA1"


def load_image(path: str | Path) -> np.ndarray:
    """Read an RGB image file into a float32 (H, W, 3) array in [0, 1]."""
    p = Path(path)
    if not p.is_file():
        raise InputValidationError(f"image file not found: {p}")
    with Image.open(p) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return validate_image(arr)


def save_image(image: np.ndarray, path: str | Path) -> None:
    image = validate_image(image)
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(Path(path), format="PNG")


def encode_image_png(image: np.ndarray) -> bytes:
    """PNG-encode an image to bytes (deterministic for fixed input)."""
    image = validate_image(image)
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    buf = BytesIO()
    Image.fromarray(data, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def load_binary_mask(path: str | Path, image_shape=None) -> np.ndarray:
    """Read a 0/1 (or 0/255) single-channel PNG into a uint8 mask."""
    p = Path(path)
    if not p.is_file():
        raise InputValidationError(f"mask file not found: {p}")
    with Image.open(p) as im:
        arr = np.asarray(im.convert("L"))
    vals = np.unique(arr)
    if np.all(np.isin(vals, (0, 255))):
        arr = (arr == 255).astype(np.uint8)
    return validate_mask(arr, image_shape)


def save_binary_mask(mask: np.ndarray, path: str | Path, *, scale: bool = True) -> None:
    mask = validate_mask(mask)
    data = mask * 255 if scale else mask
    Image.fromarray(data.astype(np.uint8), mode="L").save(Path(path), format="PNG")


def load_label_mask(path: str | Path) -> np.ndarray:
    """Read a three-label mask PNG; any value outside {0,1,2} is rejected."""
    p = Path(path)
    if not p.is_file():
        raise InputValidationError(f"label mask file not found: {p}")
    with Image.open(p) as im:
        if im.mode != "L":
            im = im.convert("L")
        arr = np.asarray(im)
    bad = np.setdiff1d(np.unique(arr), (0, 1, 2))
    if bad.size:
        raise InputValidationError(
            f"label mask {p} contains invalid values {bad.tolist()}; expected only 0/1/2"
        )
    return validate_label_map(arr)


def save_label_mask(labels: np.ndarray, path: str | Path) -> None:
    labels = validate_label_map(labels)
    Image.fromarray(labels, mode="L").save(Path(path), format="PNG")


def iter_manifest(path: str | Path) -> Iterator[SampleManifestEntry]:
    """Yield validated manifest entries in file order.

    Raises on malformed JSON, duplicate sample ids, or unresolvable paths.
    """
    p = Path(path)
    if not p.is_file():
        raise InputValidationError(f"manifest not found: {p}")
    seen: set[str] = set()
    base = p.parent
    with p.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputValidationError(f"{p}:{lineno}: invalid JSON: {exc}") from exc
            for key in ("sample_id", "image", "label_mask"):
                if key not in row:
                    raise InputValidationError(f"{p}:{lineno}: missing key {key!r}")
            sid = str(row["sample_id"])
            if sid in seen:
                raise InputValidationError(f"{p}:{lineno}: duplicate sample_id {sid!r}")
            seen.add(sid)
            result = row.get("result")
            yield SampleManifestEntry(
                sample_id=sid,
                image_path=_resolve(base, row["image"]),
                label_mask_path=_resolve(base, row["label_mask"]),
                result_path=_resolve(base, result, must_exist=False) if result else None,
            )


def _resolve(base: Path, rel: str, must_exist: bool = True) -> Path:
    p = Path(rel)
    if not p.is_absolute():
        p = base / p
    if must_exist and not p.is_file():
        raise InputValidationError(f"manifest path does not resolve: {p}")
    return p


def write_tensor_archive(tensors: dict[str, np.ndarray], path: str | Path) -> None:
    """Write named float32 tensors as length-prefixed JSON header + raw bytes."""
    names = list(tensors.keys())
    header = {
        "tensors": [
            {"name": n, "shape": list(np.asarray(tensors[n]).shape)} for n in names
        ]
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            arr = np.ascontiguousarray(np.asarray(tensors[n], dtype=np.float32))
            fh.write(arr.astype("<f4", copy=False).tobytes())


def read_tensor_archive(path: str | Path) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.is_file():
        raise InputValidationError(f"tensor archive not found: {p}")
    with p.open("rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise InputValidationError(f"{p}: not a tensor archive (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        out: dict[str, np.ndarray] = {}
        for spec in header["tensors"]:
            shape = tuple(int(s) for s in spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise InputValidationError(f"{p}: truncated payload for {spec['name']!r}")
            out[spec["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return out


def canonical_json(obj) -> str:
    """Stable JSON used for digests and golden files."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
