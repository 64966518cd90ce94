"""Region inference: tag classification, localization, label-map assembly.

The tag reasoner splits the scene into the masked target, visible
non-target objects, and occluded background subtypes. Non-target tags
take effect only when they can be spatially localized (unlocalizable
tags are hallucination-filtered out); background tags are kept even
without detections because they act as reconstruction cues, not
exclusion masks. The output label map combines the user's target mask
with the union of localized non-target regions.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clients import MllmClient, Tag2MaskClient
from .errors import InputValidationError, ResponseParseError
from .io import canonical_json, load_label_mask, save_binary_mask, save_label_mask, load_binary_mask
from .regions import build_label_map
from .types import TagReport, validate_image, validate_mask

DISPOSITION_LOCALIZED = "localized"
DISPOSITION_DISCARDED = "discarded"
DISPOSITION_OCCLUDED = "occluded-kept"


def _extract_json_object(text: str) -> dict:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    start, end = text.find("{"), text.rfind("}")
    if start == -1 or end <= start:
        raise ResponseParseError("no JSON object in response", raw_text=text)
    try:
        return json.loads(text[start : end + 1])
    except json.JSONDecodeError as exc:
        raise ResponseParseError(f"malformed JSON object: {exc}", raw_text=text) from exc


def parse_tag_response(text: str) -> TagReport:
    payload = _extract_json_object(text)
    if not isinstance(payload, dict) or "target" not in payload:
        raise ResponseParseError("response JSON missing 'target'", raw_text=text)
    try:
        return TagReport(
            target_tag=payload.get("target", ""),
            non_target_tags=payload.get("non_target", []) or [],
            background_tags=payload.get("background", []) or [],
            raw_response=text,
        )
    except Exception as exc:  # disjointness / emptiness violations
        raise ResponseParseError(f"invalid tag report: {exc}", raw_text=text) from exc


def classify_tags(client: MllmClient, image: np.ndarray, target_mask: np.ndarray) -> TagReport:
    """Query the tag reasoner; one retry on an unparseable response."""
    image = validate_image(image)
    target_mask = validate_mask(target_mask, image.shape[:2])
    text = client.complete(image, target_mask)
    try:
        return parse_tag_response(text)
    except ResponseParseError:
        retry_text = client.complete(image, target_mask)
        return parse_tag_response(retry_text)


def localize_tags(
    client: Tag2MaskClient,
    image: np.ndarray,
    tags: list[str],
    audit: list | None = None,
    keep_unlocalized: bool = False,
) -> dict[str, np.ndarray]:
    """Map each tag to the union of its detected instance masks.

    Tags with zero detections map to an empty mask; they are audited as
    discarded (hallucination filter) unless ``keep_unlocalized`` marks
    them as occluded background cues.
    """
    if not tags:
        raise InputValidationError("localize_tags needs a non-empty tag list")
    image = validate_image(image)
    shape = image.shape[:2]
    out: dict[str, np.ndarray] = {}
    for tag in tags:
        instances = client.localize(image, tag)
        union = np.zeros(shape, dtype=np.uint8)
        for inst in instances:
            union |= validate_mask(inst, shape)
        out[tag] = union
        if audit is not None:
            empty = not union.any()
            if empty:
                disposition = DISPOSITION_OCCLUDED if keep_unlocalized else DISPOSITION_DISCARDED
            else:
                disposition = DISPOSITION_LOCALIZED
            audit.append(
                {
                    "tag": tag,
                    "instances": len(instances),
                    "area": int(union.sum()),
                    "disposition": disposition,
                }
            )
    return out


@dataclass
class BfeResult:
    """Everything the adaptation stage needs from region inference."""

    tag_report: TagReport
    label_map: np.ndarray
    per_tag_masks: dict[str, np.ndarray] = field(default_factory=dict)
    audit_log: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def verify(self) -> None:
        """Recheck that the label map matches the recorded masks."""
        target = (self.label_map == 0).astype(np.uint8)
        non_target = np.zeros_like(target)
        for tag in self.tag_report.non_target_tags:
            mask = self.per_tag_masks.get(tag)
            if mask is not None:
                non_target |= mask
        rebuilt = build_label_map(target, non_target)
        if not np.array_equal(rebuilt, self.label_map):
            raise InputValidationError("label map inconsistent with per-tag masks")

    # -- serialization (deterministic bytes) --------------------------------

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_label_mask(self.label_map, out / "label_mask.png")
        mask_files: dict[str, str] = {}
        used: set[str] = set()
        for tag in [*self.tag_report.non_target_tags, *self.tag_report.background_tags]:
            if tag not in self.per_tag_masks:
                continue
            stem = re.sub(r"[^a-z0-9]+", "-", tag.lower()).strip("-") or "tag"
            name = stem
            i = 1
            while name in used:
                name = f"{stem}-{i}"
                i += 1
            used.add(name)
            rel = f"masks/{name}.png"
            (out / "masks").mkdir(exist_ok=True)
            save_binary_mask(self.per_tag_masks[tag], out / rel)
            mask_files[tag] = rel
        doc = {
            "tag_report": self.tag_report.to_dict(),
            "label_mask": "label_mask.png",
            "per_tag_masks": mask_files,
            "audit_log": self.audit_log,
            "warnings": self.warnings,
        }
        path = out / "bfe_result.json"
        path.write_text(canonical_json(doc) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "BfeResult":
        path = Path(path)
        if path.is_dir():
            path = path / "bfe_result.json"
        doc = json.loads(path.read_text(encoding="utf-8"))
        base = path.parent
        label_map = load_label_mask(base / doc["label_mask"])
        masks = {
            tag: load_binary_mask(base / rel, label_map.shape)
            for tag, rel in doc["per_tag_masks"].items()
        }
        return cls(
            tag_report=TagReport.from_dict(doc["tag_report"]),
            label_map=label_map,
            per_tag_masks=masks,
            audit_log=doc.get("audit_log", []),
            warnings=doc.get("warnings", []),
        )


def run_bfe(
    mllm: MllmClient,
    t2m: Tag2MaskClient,
    image: np.ndarray,
    target_mask: np.ndarray,
) -> BfeResult:
    """Full region-inference pass over one image-mask pair."""
    image = validate_image(image)
    target_mask = validate_mask(target_mask, image.shape[:2])

    audit: list[dict] = []
    report = classify_tags(mllm, image, target_mask)
    audit.append(
        {
            "tag": report.target_tag,
            "instances": 1,
            "area": int(target_mask.sum()),
            "disposition": DISPOSITION_LOCALIZED,
            "source": "input-mask",
        }
    )

    per_tag: dict[str, np.ndarray] = {}
    non_target = np.zeros_like(target_mask)
    if report.non_target_tags:
        masks = localize_tags(t2m, image, report.non_target_tags, audit=audit)
        per_tag.update(masks)
        for mask in masks.values():
            non_target |= mask
    if report.background_tags:
        bg_masks = localize_tags(
            t2m, image, report.background_tags, audit=audit, keep_unlocalized=True
        )
        per_tag.update(bg_masks)

    warnings = []
    if not report.background_tags:
        warnings.append("no background tags: subtype aggregation will be skipped")

    result = BfeResult(
        tag_report=report,
        label_map=build_label_map(target_mask, non_target),
        per_tag_masks=per_tag,
        audit_log=audit,
        warnings=warnings,
    )
    result.verify()
    return result
