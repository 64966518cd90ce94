"""Single-image test-time adaptation loop.

Per iteration: sample a timestep and noise, form the noised latent, run
one denoising step, normalize the background-tag attention, evaluate the
combined objective, and take an optimizer step on the adapter parameters
only. Base backbone weights are bitwise unchanged at exit.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import torch

from .backbone import DiffusionBackbone
from .errors import DegenerateRegionError, EraseError, InputValidationError, NumericalAbortError
from .losses import DEFAULT_LAMBDA, DEFAULT_TAU, normalize_attention, total_loss
from .regions import downsample_label_map
from .types import LABEL_BACKGROUND, LABEL_TARGET, validate_image

FALLBACK_TOKEN = "background"


@dataclass(frozen=True)
class TtaConfig:
    """Adaptation hyperparameters; defaults are the reference settings."""

    iterations: int = 500
    rank: int = 32
    lam: float = DEFAULT_LAMBDA
    tau: float = DEFAULT_TAU
    learning_rate: float = 1e-2
    seed: int = 0
    timestep_rule: str = "uniform:0.2,0.9"
    strength: float = 0.8
    sample_steps: int = 10

    def __post_init__(self):
        if self.iterations < 1:
            raise InputValidationError("iterations must be >= 1")
        if self.rank < 1:
            raise InputValidationError("rank must be >= 1")

    _FILE_KEYS = {
        "iterations": int,
        "rank": int,
        "lambda": float,
        "tau": float,
        "learning_rate": float,
        "seed": int,
        "timestep_rule": str,
        "strength": float,
        "sample_steps": int,
    }

    @classmethod
    def from_file(cls, path: str | Path) -> "TtaConfig":
        """Read key=value lines or a JSON object; unknown keys are rejected."""
        p = Path(path)
        if not p.is_file():
            raise InputValidationError(f"config file not found: {p}")
        text = p.read_text(encoding="utf-8").strip()
        if text.startswith("{"):
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as exc:
                raise InputValidationError(f"{p}: invalid JSON config: {exc}") from exc
        else:
            raw = {}
            for lineno, line in enumerate(text.splitlines(), start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise InputValidationError(f"{p}:{lineno}: expected key=value")
                key, value = (s.strip() for s in line.split("=", 1))
                raw[key] = value
        return cls().with_overrides(**raw)

    def with_overrides(self, **overrides) -> "TtaConfig":
        updates = {}
        for key, value in overrides.items():
            if value is None:
                continue
            if key == "lam":
                key = "lambda"
            if key not in self._FILE_KEYS:
                raise InputValidationError(f"unknown config key {key!r}")
            cast = self._FILE_KEYS[key]
            try:
                value = cast(value)
            except (TypeError, ValueError) as exc:
                raise InputValidationError(f"config key {key!r}: {exc}") from exc
            updates["lam" if key == "lambda" else key] = value
        return replace(self, **updates)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "rank": self.rank,
            "lambda": self.lam,
            "tau": self.tau,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "timestep_rule": self.timestep_rule,
            "strength": self.strength,
            "sample_steps": self.sample_steps,
        }


@dataclass
class TtaTrace:
    """Per-iteration loss records plus run metadata."""

    records: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    lora_digest: str = ""

    def write_jsonl(self, path: str | Path) -> None:
        """Loss records only; timing lives elsewhere so bytes reproduce."""
        with Path(path).open("w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def total_series(self) -> list[float]:
        return [r["l_total"] for r in self.records]

    def windowed_mean(self, window: int, end: int | None = None) -> float:
        series = self.total_series()
        end = len(series) if end is None else end
        start = max(0, end - window)
        chunk = series[start:end]
        if not chunk:
            raise InputValidationError("empty window")
        return sum(chunk) / len(chunk)


def _parse_timestep_rule(rule: str, steps: int) -> tuple[int, int]:
    try:
        kind, span = rule.split(":", 1)
        lo_frac, hi_frac = (float(s) for s in span.split(","))
    except ValueError as exc:
        raise InputValidationError(f"bad timestep rule {rule!r}") from exc
    if kind != "uniform":
        raise InputValidationError(f"unsupported timestep rule kind {kind!r}")
    if not (0.0 <= lo_frac < hi_frac <= 1.0):
        raise InputValidationError(f"timestep fractions out of order in {rule!r}")
    lo = max(1, round(lo_frac * steps))
    hi = min(steps, round(hi_frac * steps))
    return lo, hi


def run_tta(
    backbone: DiffusionBackbone,
    bfe,
    image,
    config: TtaConfig = TtaConfig(),
    on_step: Callable[[int, dict], None] | None = None,
    init_adapter_path: str | Path | None = None,
):
    """Adapt a backbone to one image-mask pair.

    ``bfe`` supplies the pixel-resolution label map and the background
    subtype tags. Returns ``(LoraState, TtaTrace)``; the adapters stay
    attached to the backbone for subsequent sampling or merging.
    """
    from .lora import inject_adapters  # local import avoids a cycle

    image = validate_image(image)
    lat_h, lat_w, _ = backbone.latent_shape
    labels = downsample_label_map(bfe.label_map, lat_h, lat_w)
    if not (labels == LABEL_TARGET).any():
        raise DegenerateRegionError("label map has no target region at latent resolution")
    if not (labels == LABEL_BACKGROUND).any():
        raise DegenerateRegionError("label map has no background region at latent resolution")

    tags = list(bfe.tag_report.background_tags) if bfe.tag_report else []
    cond = tags if tags else [FALLBACK_TOKEN]
    backbone.register_tokens(cond)

    checksum_before = backbone.base_checksum()
    lora = inject_adapters(backbone, rank=config.rank, seed=config.seed)
    if init_adapter_path is not None:
        lora.load(init_adapter_path)
    optimizer = torch.optim.Adam(lora.parameters(), lr=config.learning_rate)

    z = backbone.encode(image)
    gen = torch.Generator().manual_seed(config.seed)
    t_lo, t_hi = _parse_timestep_rule(config.timestep_rule, backbone.schedule.steps)

    trace = TtaTrace()
    started = time.perf_counter()
    for i in range(config.iterations):
        t = int(torch.randint(t_lo, t_hi + 1, (1,), generator=gen).item())
        noise = torch.randn(z.shape, generator=gen, dtype=torch.float32)
        z_t = backbone.schedule.add_noise(z, t, noise)
        z_hat, raw_attn = backbone.denoise_step(z_t, t, cond)
        att = normalize_attention(raw_attn, tags, config.tau) if tags else None
        breakdown = total_loss(z, z_hat, att, labels, config.lam)
        if not torch.isfinite(breakdown.l_total):
            trace.wall_clock = time.perf_counter() - started
            raise NumericalAbortError(
                f"non-finite loss at iteration {i}", trace=trace
            )
        optimizer.zero_grad()
        breakdown.l_total.backward()
        optimizer.step()
        record = {"iteration": i, **breakdown.floats()}
        trace.records.append(record)
        if on_step is not None:
            on_step(i, record)

    trace.wall_clock = time.perf_counter() - started
    trace.lora_digest = lora.digest()
    if backbone.base_checksum() != checksum_before:
        raise EraseError("base weights changed during adaptation")
    return lora, trace
