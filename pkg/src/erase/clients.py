"""Clients for external models: tag reasoning, tag-to-mask localization,
and judge scoring.

Every client kind has three flavors: an HTTP adapter for a live
endpoint, a fixture client that replays recorded responses keyed by a
request digest, and a recording wrapper that captures live traffic into
fixture files. Fixture files are JSON lines pairing digests with
responses or mask file paths, so the whole pipeline replays without any
external model.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
from collections import deque
from dataclasses import dataclass
from io import BytesIO
from pathlib import Path
from typing import Protocol

import numpy as np
import requests
from PIL import Image

from .errors import ClientError, InputValidationError
from .types import validate_image, validate_mask

DEFAULT_BOX_THRESHOLD = 0.3
DEFAULT_MASK_THRESHOLD = 0.5
MLLM_API_KEY_ENV = "ERASE_MLLM_API_KEY"
T2M_API_KEY_ENV = "ERASE_T2M_API_KEY"
JUDGE_API_KEY_ENV = "ERASE_JUDGE_API_KEY"


@dataclass(frozen=True)
class PromptEvent:
    """A point or box refinement prompt with include/exclude polarity."""

    kind: str  # "point" | "bbox"
    polarity: str  # "include" | "exclude"
    point: tuple[int, int] | None = None  # (x, y)
    box: tuple[int, int, int, int] | None = None  # (x0, y0, x1, y1)

    def __post_init__(self):
        if self.kind not in ("point", "bbox"):
            raise InputValidationError(f"unknown prompt kind {self.kind!r}")
        if self.polarity not in ("include", "exclude"):
            raise InputValidationError(f"unknown polarity {self.polarity!r}")
        if self.kind == "point" and self.point is None:
            raise InputValidationError("point prompt needs coordinates")
        if self.kind == "bbox" and self.box is None:
            raise InputValidationError("bbox prompt needs a box")

    def validate_bounds(self, height: int, width: int) -> None:
        if self.kind == "point":
            x, y = self.point
            if not (0 <= x < width and 0 <= y < height):
                raise InputValidationError(f"point ({x}, {y}) outside {width}x{height}")
        else:
            x0, y0, x1, y1 = self.box
            if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
                raise InputValidationError(f"box {self.box} outside {width}x{height}")

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "polarity": self.polarity}
        if self.point is not None:
            out["point"] = list(self.point)
        if self.box is not None:
            out["box"] = list(self.box)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PromptEvent":
        return cls(
            kind=d.get("kind", ""),
            polarity=d.get("polarity", ""),
            point=tuple(d["point"]) if d.get("point") else None,
            box=tuple(d["box"]) if d.get("box") else None,
        )


class MllmClient(Protocol):
    def complete(self, image: np.ndarray, target_mask: np.ndarray) -> str: ...


class Tag2MaskClient(Protocol):
    def localize(self, image: np.ndarray, tag: str) -> list[np.ndarray]: ...

    def segment_prompt(self, image: np.ndarray, event: PromptEvent) -> np.ndarray: ...


class JudgeClient(Protocol):
    def judge(
        self, input_image: np.ndarray, output_image: np.ndarray, target_description: str
    ) -> str: ...


# -- digests ---------------------------------------------------------------


def _array_digest(arr: np.ndarray) -> str:
    arr = np.ascontiguousarray(arr)
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode())
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def _payload_digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def mllm_request_digest(model_name: str, prompt: str, image, mask) -> str:
    return _payload_digest(
        {
            "op": "mllm",
            "model": model_name,
            "prompt": hashlib.sha256(prompt.encode("utf-8")).hexdigest(),
            "image": _array_digest(np.asarray(image, dtype=np.float32)),
            "mask": _array_digest(np.asarray(mask, dtype=np.uint8)),
        }
    )


def t2m_request_digest(image, tag: str, box_threshold: float, mask_threshold: float) -> str:
    return _payload_digest(
        {
            "op": "t2m",
            "tag": tag,
            "box_threshold": box_threshold,
            "mask_threshold": mask_threshold,
            "image": _array_digest(np.asarray(image, dtype=np.float32)),
        }
    )


def prompt_request_digest(image, event: PromptEvent) -> str:
    return _payload_digest(
        {
            "op": "t2m_prompt",
            "event": event.to_dict(),
            "image": _array_digest(np.asarray(image, dtype=np.float32)),
        }
    )


def judge_request_digest(input_image, output_image, target_description: str) -> str:
    return _payload_digest(
        {
            "op": "judge",
            "target": target_description,
            "input": _array_digest(np.asarray(input_image, dtype=np.float32)),
            "output": _array_digest(np.asarray(output_image, dtype=np.float32)),
        }
    )


# -- HTTP adapters ----------------------------------------------------------


def _png_b64(image: np.ndarray) -> str:
    arr = np.asarray(image)
    if arr.ndim == 2:
        data = (arr * 255 if arr.max() <= 1 else arr).astype(np.uint8)
        im = Image.fromarray(data, mode="L")
    else:
        im = Image.fromarray(np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8), "RGB")
    buf = BytesIO()
    im.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _b64_mask(data: str, shape) -> np.ndarray:
    with Image.open(BytesIO(base64.b64decode(data))) as im:
        arr = np.asarray(im.convert("L"))
    mask = (arr >= 128).astype(np.uint8)
    return validate_mask(mask, shape)


def _post(endpoint: str, payload: dict, timeout: float, api_key_env: str) -> dict:
    headers = {}
    key = os.environ.get(api_key_env)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    try:
        resp = requests.post(endpoint, json=payload, timeout=timeout, headers=headers)
    except requests.RequestException as exc:
        raise ClientError(f"transport failure for {endpoint}: {exc}", retryable=True) from exc
    if resp.status_code >= 500:
        raise ClientError(f"{endpoint} returned {resp.status_code}", retryable=True)
    if resp.status_code != 200:
        raise ClientError(f"{endpoint} returned {resp.status_code}: {resp.text[:200]}")
    try:
        return resp.json()
    except ValueError as exc:
        raise ClientError(f"{endpoint} returned non-JSON body", retryable=True) from exc


def load_prompt_template(name: str) -> str:
    path = Path(__file__).parent / "prompts" / name
    return path.read_text(encoding="utf-8")


class HttpMllmClient:
    """Generic JSON-over-HTTP adapter for a hosted multimodal LLM."""

    def __init__(
        self,
        endpoint: str,
        model_name: str = "default",
        prompt_template: str | None = None,
        timeout: float = 120.0,
    ):
        self.endpoint = endpoint
        self.model_name = model_name
        self.prompt_template = prompt_template or load_prompt_template("tag_classification.txt")
        self.timeout = timeout

    def complete(self, image, target_mask) -> str:
        payload = {
            "model": self.model_name,
            "prompt": self.prompt_template,
            "image": _png_b64(validate_image(image)),
            "mask": _png_b64(validate_mask(target_mask)),
        }
        body = _post(self.endpoint, payload, self.timeout, MLLM_API_KEY_ENV)
        if "text" not in body:
            raise ClientError(f"{self.endpoint} response missing 'text' field")
        return str(body["text"])


class HttpTag2MaskClient:
    """Adapter for an open-vocabulary grounding + segmentation service."""

    def __init__(
        self,
        endpoint: str,
        box_threshold: float = DEFAULT_BOX_THRESHOLD,
        mask_threshold: float = DEFAULT_MASK_THRESHOLD,
        timeout: float = 120.0,
    ):
        if not (0.0 < box_threshold < 1.0 and 0.0 < mask_threshold < 1.0):
            raise InputValidationError("thresholds must lie in (0, 1)")
        self.endpoint = endpoint
        self.box_threshold = box_threshold
        self.mask_threshold = mask_threshold
        self.timeout = timeout

    def localize(self, image, tag: str) -> list[np.ndarray]:
        image = validate_image(image)
        payload = {
            "tag": tag,
            "box_threshold": self.box_threshold,
            "mask_threshold": self.mask_threshold,
            "image": _png_b64(image),
        }
        body = _post(self.endpoint, payload, self.timeout, T2M_API_KEY_ENV)
        return [_b64_mask(m, image.shape[:2]) for m in body.get("masks", [])]

    def segment_prompt(self, image, event: PromptEvent) -> np.ndarray:
        image = validate_image(image)
        payload = {"prompt": event.to_dict(), "image": _png_b64(image)}
        body = _post(self.endpoint, payload, self.timeout, T2M_API_KEY_ENV)
        if "mask" not in body:
            raise ClientError(f"{self.endpoint} response missing 'mask' field")
        return _b64_mask(body["mask"], image.shape[:2])


class HttpJudgeClient:
    def __init__(self, endpoint: str, model_name: str = "default", timeout: float = 120.0):
        self.endpoint = endpoint
        self.model_name = model_name
        self.prompt_template = load_prompt_template("removal_judge.txt")
        self.timeout = timeout

    def judge(self, input_image, output_image, target_description: str) -> str:
        payload = {
            "model": self.model_name,
            "prompt": self.prompt_template.replace("{target}", target_description),
            "input": _png_b64(validate_image(input_image)),
            "output": _png_b64(validate_image(output_image)),
        }
        body = _post(self.endpoint, payload, self.timeout, JUDGE_API_KEY_ENV)
        if "text" not in body:
            raise ClientError(f"{self.endpoint} response missing 'text' field")
        return str(body["text"])


# -- fixtures ----------------------------------------------------------------


class FixtureStore:
    """JSONL fixture file plus a sibling masks/ directory for payloads."""

    def __init__(self, path: str | Path, writable: bool = False):
        self.path = Path(path)
        self.mask_dir = self.path.parent / (self.path.stem + "_masks")
        self.writable = writable
        self._entries: dict[str, dict] = {}
        if self.path.is_file():
            with self.path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        entry = json.loads(line)
                        self._entries[entry["digest"]] = entry
        elif not writable:
            raise InputValidationError(f"fixture file not found: {self.path}")

    def lookup(self, digest: str) -> dict | None:
        return self._entries.get(digest)

    def record(self, digest: str, entry: dict) -> None:
        if not self.writable:
            raise InputValidationError("fixture store opened read-only")
        if digest in self._entries:
            return
        entry = {"digest": digest, **entry}
        self._entries[digest] = entry
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def save_mask(self, mask: np.ndarray, digest: str, index: int) -> str:
        self.mask_dir.mkdir(parents=True, exist_ok=True)
        rel = f"{digest[:16]}_{index}.png"
        Image.fromarray((validate_mask(mask) * 255).astype(np.uint8), "L").save(
            self.mask_dir / rel, format="PNG"
        )
        return rel

    def load_mask(self, rel: str, shape) -> np.ndarray:
        p = self.mask_dir / rel
        if not p.is_file():
            raise ClientError(f"fixture mask missing: {p}")
        with Image.open(p) as im:
            arr = np.asarray(im.convert("L"))
        return validate_mask((arr >= 128).astype(np.uint8), shape)


def _fixture_miss(digest: str, store: FixtureStore) -> ClientError:
    return ClientError(f"no recorded fixture for request {digest[:16]}... in {store.path}")


class FixtureMllmClient:
    def __init__(self, store: FixtureStore | str | Path, model_name: str = "fixture",
                 prompt_template: str | None = None):
        self.store = store if isinstance(store, FixtureStore) else FixtureStore(store)
        self.model_name = model_name
        self.prompt_template = prompt_template or load_prompt_template("tag_classification.txt")

    def complete(self, image, target_mask) -> str:
        digest = mllm_request_digest(self.model_name, self.prompt_template, image, target_mask)
        entry = self.store.lookup(digest)
        if entry is None:
            raise _fixture_miss(digest, self.store)
        return entry["response"]


class RecordingMllmClient:
    def __init__(self, inner, store: FixtureStore):
        self.inner = inner
        self.store = store
        self.model_name = inner.model_name
        self.prompt_template = inner.prompt_template

    def complete(self, image, target_mask) -> str:
        digest = mllm_request_digest(self.model_name, self.prompt_template, image, target_mask)
        response = self.inner.complete(image, target_mask)
        self.store.record(digest, {"kind": "mllm", "response": response})
        return response


class FixtureTag2MaskClient:
    def __init__(
        self,
        store: FixtureStore | str | Path,
        box_threshold: float = DEFAULT_BOX_THRESHOLD,
        mask_threshold: float = DEFAULT_MASK_THRESHOLD,
    ):
        self.store = store if isinstance(store, FixtureStore) else FixtureStore(store)
        self.box_threshold = box_threshold
        self.mask_threshold = mask_threshold

    def localize(self, image, tag: str) -> list[np.ndarray]:
        image = validate_image(image)
        digest = t2m_request_digest(image, tag, self.box_threshold, self.mask_threshold)
        entry = self.store.lookup(digest)
        if entry is None:
            raise _fixture_miss(digest, self.store)
        return [self.store.load_mask(rel, image.shape[:2]) for rel in entry["masks"]]

    def segment_prompt(self, image, event: PromptEvent) -> np.ndarray:
        image = validate_image(image)
        digest = prompt_request_digest(image, event)
        entry = self.store.lookup(digest)
        if entry is None:
            raise _fixture_miss(digest, self.store)
        return self.store.load_mask(entry["mask"], image.shape[:2])


class RecordingTag2MaskClient:
    def __init__(self, inner, store: FixtureStore):
        self.inner = inner
        self.store = store
        self.box_threshold = inner.box_threshold
        self.mask_threshold = inner.mask_threshold

    def localize(self, image, tag: str) -> list[np.ndarray]:
        image = validate_image(image)
        digest = t2m_request_digest(image, tag, self.box_threshold, self.mask_threshold)
        masks = self.inner.localize(image, tag)
        rels = [self.store.save_mask(m, digest, i) for i, m in enumerate(masks)]
        self.store.record(digest, {"kind": "t2m", "masks": rels})
        return masks

    def segment_prompt(self, image, event: PromptEvent) -> np.ndarray:
        image = validate_image(image)
        digest = prompt_request_digest(image, event)
        mask = self.inner.segment_prompt(image, event)
        rel = self.store.save_mask(mask, digest, 0)
        self.store.record(digest, {"kind": "t2m_prompt", "mask": rel})
        return mask


class FixtureJudgeClient:
    def __init__(self, store: FixtureStore | str | Path):
        self.store = store if isinstance(store, FixtureStore) else FixtureStore(store)

    def judge(self, input_image, output_image, target_description: str) -> str:
        digest = judge_request_digest(input_image, output_image, target_description)
        entry = self.store.lookup(digest)
        if entry is None:
            raise _fixture_miss(digest, self.store)
        return entry["response"]


# -- toy segmenter ------------------------------------------------------------


class ToyTag2MaskClient:
    """Deterministic prompt segmenter for demos and service tests.

    Point prompts flood-fill the connected region of similar color around
    the click; box prompts return the box itself. Tag localization has no
    model behind it and reports no detections.
    """

    def __init__(self, color_tolerance: float = 0.12,
                 box_threshold: float = DEFAULT_BOX_THRESHOLD,
                 mask_threshold: float = DEFAULT_MASK_THRESHOLD):
        self.color_tolerance = color_tolerance
        self.box_threshold = box_threshold
        self.mask_threshold = mask_threshold

    def localize(self, image, tag: str) -> list[np.ndarray]:
        validate_image(image)
        return []

    def segment_prompt(self, image, event: PromptEvent) -> np.ndarray:
        image = validate_image(image)
        h, w = image.shape[:2]
        event.validate_bounds(h, w)
        mask = np.zeros((h, w), dtype=np.uint8)
        if event.kind == "bbox":
            x0, y0, x1, y1 = event.box
            mask[y0:y1, x0:x1] = 1
            return mask
        x, y = event.point
        seed = image[y, x]
        similar = np.max(np.abs(image - seed), axis=2) <= self.color_tolerance
        queue = deque([(y, x)])
        mask[y, x] = 1
        while queue:
            cy, cx = queue.popleft()
            for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                if 0 <= ny < h and 0 <= nx < w and similar[ny, nx] and not mask[ny, nx]:
                    mask[ny, nx] = 1
                    queue.append((ny, nx))
        return mask


# -- CLI spec parsing ----------------------------------------------------------


def make_mllm_client(spec: str) -> MllmClient:
    """Build a client from 'fixture:<path>' or 'http:<url>'."""
    kind, _, rest = spec.partition(":")
    if kind == "fixture" and rest:
        return FixtureMllmClient(rest)
    if kind in ("http", "https") and rest:
        return HttpMllmClient(f"{kind}:{rest}")
    raise InputValidationError(f"unrecognized MLLM client spec {spec!r}")


def make_t2m_client(spec: str) -> Tag2MaskClient:
    """Build a client from 'fixture:<path>', 'http:<url>', or 'toy'."""
    kind, _, rest = spec.partition(":")
    if kind == "toy":
        return ToyTag2MaskClient()
    if kind == "fixture" and rest:
        return FixtureTag2MaskClient(rest)
    if kind in ("http", "https") and rest:
        return HttpTag2MaskClient(f"{kind}:{rest}")
    raise InputValidationError(f"unrecognized Tag2Mask client spec {spec!r}")


def make_judge_client(spec: str) -> JudgeClient:
    kind, _, rest = spec.partition(":")
    if kind == "fixture" and rest:
        return FixtureJudgeClient(rest)
    if kind in ("http", "https") and rest:
        return HttpJudgeClient(f"{kind}:{rest}")
    raise InputValidationError(f"unrecognized judge client spec {spec!r}")
