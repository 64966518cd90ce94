"""Session-based HTTP API for human-guided mask and tag refinement.

Workflow per session: upload an image and target mask, refine the
non-target mask with point/box prompts (include or exclude), edit the
background and non-target tag lists, then launch an adaptation job and
poll it to completion. Results are byte-identical to an equivalent CLI
run with the same inputs, config, and seed.

State is in-memory; an optional snapshot directory persists a session's
inputs and refined label map on demand.
"""

from __future__ import annotations

import base64
import hashlib
import json
import threading
import uuid
from dataclasses import dataclass, field
from io import BytesIO
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from PIL import Image
from pydantic import BaseModel, Field

from .backbone import sample_removal
from .bfe import BfeResult
from .clients import PromptEvent, Tag2MaskClient
from .errors import EraseError, InputValidationError
from .io import canonical_json, encode_image_png, save_binary_mask, save_image, save_label_mask
from .metrics import ToyFeatureExtractor, compute_sample_metrics
from .regions import build_label_map
from .tta import FALLBACK_TOKEN, TtaConfig, run_tta
from .types import TagReport, validate_image, validate_mask

JOB_IDLE = "idle"
JOB_RUNNING = "running"
JOB_DONE = "done"
JOB_FAILED = "failed"


def _error(status: int, code: str, message: str) -> HTTPException:
    return HTTPException(status_code=status, detail={"code": code, "message": message})


@dataclass
class JobState:
    status: str = JOB_IDLE
    iteration: int = 0
    total_iterations: int = 0
    latest: dict | None = None
    config: dict | None = None
    error: str | None = None
    result_png: bytes | None = None
    result_hash: str | None = None
    metrics: dict | None = None
    trace_tail: list = field(default_factory=list)


@dataclass
class Session:
    id: str
    image: np.ndarray
    target_mask: np.ndarray
    non_target_mask: np.ndarray
    background_tags: list[str] = field(default_factory=list)
    non_target_tags: list[str] = field(default_factory=list)
    prompt_history: list[dict] = field(default_factory=list)
    job: JobState = field(default_factory=JobState)
    lock: threading.Lock = field(default_factory=threading.Lock)


class TagsBody(BaseModel):
    background: list[str] = []
    non_target: list[str] = []


class JobBody(BaseModel):
    model_config = {"populate_by_name": True}

    iterations: int | None = None
    rank: int | None = None
    lam: float | None = Field(None, alias="lambda")
    tau: float | None = None
    seed: int | None = None
    strength: float | None = None
    sample_steps: int | None = None


def _decode_png(data: bytes, mode: str) -> np.ndarray:
    try:
        with Image.open(BytesIO(data)) as im:
            if mode == "rgb":
                return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            arr = np.asarray(im.convert("L"))
    except Exception as exc:
        raise _error(422, "bad_image", f"cannot decode PNG payload: {exc}") from exc
    if np.all(np.isin(np.unique(arr), (0, 255))):
        arr = (arr == 255).astype(np.uint8)
    return arr


def _mask_b64(mask: np.ndarray) -> str:
    buf = BytesIO()
    Image.fromarray((mask * 255).astype(np.uint8), "L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def create_app(
    t2m: Tag2MaskClient,
    backbone_factory,
    default_seed: int = 0,
    snapshot_dir: str | None = None,
    extractor=None,
) -> FastAPI:
    app = FastAPI(title="erase interactive control")
    sessions: dict[str, Session] = {}
    store_lock = threading.Lock()
    extractor = extractor or ToyFeatureExtractor(seed=0)

    def get_session(session_id: str) -> Session:
        with store_lock:
            session = sessions.get(session_id)
        if session is None:
            raise _error(404, "unknown_session", f"no session {session_id!r}")
        return session

    @app.post("/sessions")
    async def create_session(request: Request):
        content_type = request.headers.get("content-type", "")
        if content_type.startswith("multipart/"):
            form = await request.form()
            if "image" not in form or "target_mask" not in form:
                raise _error(422, "missing_field", "multipart needs image and target_mask")
            image_bytes = await form["image"].read()
            mask_bytes = await form["target_mask"].read()
        else:
            try:
                body = await request.json()
            except Exception as exc:
                raise _error(422, "bad_body", f"expected JSON or multipart: {exc}") from exc
            try:
                image_bytes = base64.b64decode(body["image"])
                mask_bytes = base64.b64decode(body["target_mask"])
            except (KeyError, TypeError, ValueError) as exc:
                raise _error(422, "missing_field",
                             "body needs base64 'image' and 'target_mask'") from exc
        image = _decode_png(image_bytes, "rgb")
        mask = _decode_png(mask_bytes, "mask")
        try:
            image = validate_image(image)
            mask = validate_mask(mask, image.shape[:2])
        except InputValidationError as exc:
            raise _error(422, "invalid_input", str(exc)) from exc
        session = Session(
            id=uuid.uuid4().hex,
            image=image,
            target_mask=mask,
            non_target_mask=np.zeros(image.shape[:2], dtype=np.uint8),
        )
        with store_lock:
            sessions[session.id] = session
        return {"session_id": session.id, "height": image.shape[0], "width": image.shape[1]}

    @app.post("/sessions/{session_id}/prompts")
    def apply_prompt(session_id: str, body: dict):
        session = get_session(session_id)
        try:
            event = PromptEvent.from_dict(body)
            event.validate_bounds(*session.image.shape[:2])
        except InputValidationError as exc:
            raise _error(422, "invalid_prompt", str(exc)) from exc
        with session.lock:
            region = validate_mask(
                t2m.segment_prompt(session.image, event), session.image.shape[:2]
            )
            if event.polarity == "include":
                session.non_target_mask = session.non_target_mask | region
            else:
                session.non_target_mask = session.non_target_mask & (1 - region)
            session.prompt_history.append(event.to_dict())
            area = int(session.non_target_mask.sum())
            return {
                "mask": _mask_b64(session.non_target_mask),
                "area": area,
                "prompts_applied": len(session.prompt_history),
            }

    @app.get("/sessions/{session_id}/mask")
    def get_mask(session_id: str):
        session = get_session(session_id)
        with session.lock:
            return {
                "mask": _mask_b64(session.non_target_mask),
                "area": int(session.non_target_mask.sum()),
            }

    @app.get("/sessions/{session_id}/label-mask")
    def get_label_mask(session_id: str):
        session = get_session(session_id)
        with session.lock:
            labels = build_label_map(session.target_mask, session.non_target_mask)
        buf = BytesIO()
        Image.fromarray(labels, mode="L").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.put("/sessions/{session_id}/tags")
    def set_tags(session_id: str, body: TagsBody):
        session = get_session(session_id)
        try:
            report = TagReport(
                target_tag="target",
                non_target_tags=body.non_target,
                background_tags=body.background,
            )
        except InputValidationError as exc:
            raise _error(422, "invalid_tags", str(exc)) from exc
        with session.lock:
            session.background_tags = report.background_tags
            session.non_target_tags = report.non_target_tags
        response = {
            "background": report.background_tags,
            "non_target": report.non_target_tags,
        }
        if not report.background_tags:
            response["warning"] = "no background tags: subtype aggregation will be skipped"
        return response

    @app.get("/sessions/{session_id}/tags")
    def get_tags(session_id: str):
        session = get_session(session_id)
        with session.lock:
            return {
                "background": list(session.background_tags),
                "non_target": list(session.non_target_tags),
            }

    def _run_job(session: Session, config: TtaConfig):
        job = session.job
        try:
            with session.lock:
                labels = build_label_map(session.target_mask, session.non_target_mask)
                tags = list(session.background_tags)
                non_target_tags = list(session.non_target_tags)
                image = session.image.copy()
            bfe = BfeResult(
                tag_report=TagReport(
                    target_tag="target",
                    non_target_tags=non_target_tags,
                    background_tags=tags,
                ),
                label_map=labels,
            )
            backbone = backbone_factory(config.seed)

            def on_step(i, record):
                job.iteration = i + 1
                job.latest = record
                job.trace_tail.append(record)
                if len(job.trace_tail) > 50:
                    job.trace_tail.pop(0)

            lora, trace = run_tta(backbone, bfe, image, config, on_step=on_step)
            cond = tags if tags else [FALLBACK_TOKEN]
            result = sample_removal(
                backbone, backbone.encode(image), cond,
                strength=config.strength, steps=config.sample_steps, seed=config.seed,
            )
            png = encode_image_png(result)
            job.result_png = png
            job.result_hash = hashlib.sha256(png).hexdigest()
            job.metrics = compute_sample_metrics(image, result, labels, extractor)
            job.status = JOB_DONE
        except Exception as exc:  # job errors surface via status, not a crash
            job.error = str(exc)
            job.status = JOB_FAILED

    @app.post("/sessions/{session_id}/jobs")
    def launch_job(session_id: str, body: JobBody):
        session = get_session(session_id)
        with session.lock:
            if session.job.status == JOB_RUNNING:
                raise _error(409, "job_running", "a job is already running for this session")
            try:
                config = TtaConfig(seed=default_seed).with_overrides(
                    **body.model_dump(exclude_none=True)
                )
            except InputValidationError as exc:
                raise _error(422, "invalid_config", str(exc)) from exc
            session.job = JobState(
                status=JOB_RUNNING,
                total_iterations=config.iterations,
                config=config.to_dict(),
            )
            thread = threading.Thread(
                target=_run_job, args=(session, config), daemon=True
            )
            thread.start()
        return {"status": JOB_RUNNING, "config": session.job.config}

    @app.get("/sessions/{session_id}/jobs/current")
    def job_status(session_id: str):
        job = get_session(session_id).job
        return {
            "status": job.status,
            "iteration": job.iteration,
            "total_iterations": job.total_iterations,
            "latest": job.latest,
            "trace_tail": job.trace_tail[-10:],
            "error": job.error,
            "config": job.config,
        }

    @app.get("/sessions/{session_id}/result")
    def job_result(session_id: str):
        job = get_session(session_id).job
        if job.status == JOB_FAILED:
            raise _error(409, "job_failed", job.error or "job failed")
        if job.status != JOB_DONE or job.result_png is None:
            raise _error(409, "not_ready", f"job status is {job.status!r}")
        return {
            "image": base64.b64encode(job.result_png).decode("ascii"),
            "result_hash": job.result_hash,
            "metrics": job.metrics,
            "config": job.config,
        }

    @app.post("/sessions/{session_id}/snapshot")
    def snapshot(session_id: str):
        if snapshot_dir is None:
            raise _error(409, "snapshots_disabled", "server started without --snapshot-dir")
        session = get_session(session_id)
        out = Path(snapshot_dir) / session.id
        out.mkdir(parents=True, exist_ok=True)
        with session.lock:
            save_image(session.image, out / "image.png")
            save_binary_mask(session.target_mask, out / "target_mask.png")
            save_binary_mask(session.non_target_mask, out / "non_target_mask.png")
            labels = build_label_map(session.target_mask, session.non_target_mask)
            save_label_mask(labels, out / "label_mask.png")
            doc = {
                "background_tags": session.background_tags,
                "non_target_tags": session.non_target_tags,
                "prompt_history": session.prompt_history,
            }
        (out / "session.json").write_text(canonical_json(doc) + "\n", encoding="utf-8")
        return {"snapshot": str(out)}

    return app
