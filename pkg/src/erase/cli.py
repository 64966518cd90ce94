"""Command-line entry point: bfe, run, eval, sweep, serve, demo.

Exit codes: 0 success, 2 external-client failure, 3 input validation
failure, 4 numerical abort. Config precedence: flags override the config
file, the file overrides built-in defaults.
"""

from __future__ import annotations

import functools
import hashlib
import json
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import bench
from .backbone import ToyBackbone, sample_removal
from .bfe import BfeResult, run_bfe
from .clients import make_mllm_client, make_t2m_client
from .errors import (
    ClientError,
    EraseError,
    InputValidationError,
    NumericalAbortError,
)
from .figures import render_comparison, render_eval_summary, render_loss_curves
from .io import (
    canonical_json,
    load_binary_mask,
    load_image,
    load_label_mask,
    save_binary_mask,
    save_image,
    save_label_mask,
)
from .scene import generate_scene
from .tta import FALLBACK_TOKEN, TtaConfig, run_tta
from .types import TagReport


def _fail(exc: Exception, code: int):
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def cli_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ClientError as exc:
            _fail(exc, 2)
        except InputValidationError as exc:
            _fail(exc, 3)
        except NumericalAbortError as exc:
            _fail(exc, 4)
        except EraseError as exc:
            _fail(exc, 1)

    return wrapper


def _make_backbone(spec: str, seed: int):
    if spec == "toy":
        return ToyBackbone(seed=seed)
    if spec.startswith("shim:"):
        from .shim import ShimBackbone

        return ShimBackbone(spec[len("shim:"):])
    raise InputValidationError(f"unknown backbone spec {spec!r}; use toy or shim:<host:port>")


def _build_config(config_path, **flags) -> TtaConfig:
    cfg = TtaConfig.from_file(config_path) if config_path else TtaConfig()
    return cfg.with_overrides(**flags)


@click.group()
def main():
    """Dataset-free object removal toolkit."""
    torch.set_num_threads(1)


@main.command("bfe")
@click.option("--image", "image_path", required=True, help="Input RGB image (PNG/JPEG).")
@click.option("--mask", "mask_path", required=True, help="Binary target mask PNG.")
@click.option("--mllm", "mllm_spec", required=True, help="fixture:<path> or http(s):<url>.")
@click.option("--t2m", "t2m_spec", required=True, help="fixture:<path>, http(s):<url>, or toy.")
@click.option("--out", "out_dir", required=True, help="Output directory.")
@click.option("--seed", default=0, show_default=True, help="Unused here; accepted for symmetry.")
@cli_errors
def cmd_bfe(image_path, mask_path, mllm_spec, t2m_spec, out_dir, seed):
    """Infer the three-label region map and background tags for one image."""
    image = load_image(image_path)
    mask = load_binary_mask(mask_path, image.shape[:2])
    result = run_bfe(make_mllm_client(mllm_spec), make_t2m_client(t2m_spec), image, mask)
    path = result.save(out_dir)
    for warning in result.warnings:
        click.echo(f"warning: {warning}", err=True)
    click.echo(f"wrote {path}")


@main.command("run")
@click.option("--image", "image_path", required=True, help="Input RGB image.")
@click.option("--mask", "mask_path", default=None,
              help="Three-label mask PNG (alternative to --bfe-result).")
@click.option("--bfe-result", "bfe_path", default=None,
              help="Directory or JSON produced by `erase bfe`.")
@click.option("--tags", default=None,
              help="Comma-separated background tags when using --mask.")
@click.option("--config", "config_path", default=None, help="Config file (key=value or JSON).")
@click.option("--out", "out_dir", required=True, help="Output directory.")
@click.option("--seed", type=int, default=None, help="Adaptation and sampling seed.")
@click.option("--rank", type=int, default=None, help="Adapter rank.")
@click.option("--iters", "iterations", type=int, default=None, help="Adaptation iterations.")
@click.option("--lambda", "lam", type=float, default=None, help="Puzzle-loss weight.")
@click.option("--tau", type=float, default=None, help="Attention softmax temperature.")
@click.option("--strength", type=float, default=None, help="Final sampling noise strength.")
@click.option("--reuse-adapter", "reuse_adapter", default=None,
              help="Adapter archive to warm-start from.")
@click.option("--backbone", "backbone_spec", default="toy", show_default=True,
              help="toy or shim:<host:port>.")
@cli_errors
def cmd_run(image_path, mask_path, bfe_path, tags, config_path, out_dir, seed, rank,
            iterations, lam, tau, strength, reuse_adapter, backbone_spec):
    """Adapt the backbone to one image and synthesize the removal result."""
    image = load_image(image_path)
    if (mask_path is None) == (bfe_path is None):
        raise InputValidationError("provide exactly one of --mask or --bfe-result")
    if bfe_path is not None:
        bfe = BfeResult.load(bfe_path)
    else:
        labels = load_label_mask(mask_path)
        if labels.shape != image.shape[:2]:
            raise InputValidationError("label mask shape does not match image")
        tag_list = [t.strip() for t in (tags or "").split(",") if t.strip()]
        bfe = BfeResult(
            tag_report=TagReport(target_tag="target", background_tags=tag_list),
            label_map=labels,
        )

    config = _build_config(
        config_path, seed=seed, rank=rank, iterations=iterations,
        lam=lam, tau=tau, strength=strength,
    )
    backbone = _make_backbone(backbone_spec, config.seed)

    def progress(i, record):
        if (i + 1) % 100 == 0 or i == 0:
            click.echo(f"iter {i + 1}/{config.iterations} l_total={record['l_total']:.5f}",
                       err=True)

    lora, trace = run_tta(
        backbone, bfe, image, config,
        on_step=progress, init_adapter_path=reuse_adapter,
    )
    tags_list = list(bfe.tag_report.background_tags)
    cond = tags_list if tags_list else [FALLBACK_TOKEN]
    result = sample_removal(
        backbone, backbone.encode(image), cond,
        strength=config.strength, steps=config.sample_steps, seed=config.seed,
    )

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_image(result, out / "result.png")
    trace.write_jsonl(out / "trace.jsonl")
    lora.save(out / "adapters.bin")
    render_loss_curves(trace.records, out / "loss_curve.png")
    render_comparison(image, result, out / "comparison.png")
    result_digest = hashlib.sha256((out / "result.png").read_bytes()).hexdigest()
    (out / "run_meta.json").write_text(
        json.dumps(
            {
                "config": config.to_dict(),
                "wall_clock": trace.wall_clock,  # timing only; not reproducible
                "lora_digest": trace.lora_digest,
                "result_sha256": result_digest,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    click.echo(f"wrote {out / 'result.png'} (sha256 {result_digest[:16]})")


@main.command("eval")
@click.option("--manifest", "manifest_path", required=True, help="JSONL manifest.")
@click.option("--pred-dir", default=None, help="Directory of <sample_id>.png predictions.")
@click.option("--out", "out_dir", required=True, help="Report directory.")
@click.option("--seed", type=int, default=0, show_default=True,
              help="Seed for the toy feature extractor.")
@cli_errors
def cmd_eval(manifest_path, pred_dir, out_dir, seed):
    """Score predictions against a manifest; writes CSV, JSON, and figures."""
    from .metrics import ToyFeatureExtractor

    report, missing = bench.evaluate_manifest(
        manifest_path, pred_dir, extractor=ToyFeatureExtractor(seed=seed)
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv")
    report.write_json(out / "metrics.json")
    render_eval_summary(report.rows, out / "eval_summary.png")
    click.echo(f"wrote {out / 'metrics.csv'}")
    if missing:
        _fail(InputValidationError("one or more predictions missing; rows flagged absent"), 3)


@main.command("sweep")
@click.option("--out", "out_dir", required=True, help="Sweep output directory.")
@click.option("--ranks", default="16,32,64,128", show_default=True)
@click.option("--iters-list", default="100,200,300,400,500", show_default=True)
@click.option("--scene-seeds", default="0", show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--config", "config_path", default=None, help="Base config file.")
@click.option("--seed", type=int, default=None, help="Adaptation seed for all cells.")
@click.option("--lambda", "lam", type=float, default=None)
@click.option("--tau", type=float, default=None)
@click.option("--strength", type=float, default=None)
@cli_errors
def cmd_sweep(out_dir, ranks, iters_list, scene_seeds, workers, config_path, seed, lam,
              tau, strength):
    """Run the rank-by-iterations grid on synthetic scenes (resumable)."""
    base = _build_config(config_path, seed=seed, lam=lam, tau=tau, strength=strength)
    plan = bench.ExperimentPlan.sweep(
        out_dir,
        ranks=[int(r) for r in ranks.split(",")],
        iteration_counts=[int(i) for i in iters_list.split(",")],
        scene_seeds=[int(s) for s in scene_seeds.split(",")],
        base_config=base,
    )
    paths = bench.run_experiment(plan, workers=workers)
    click.echo(f"wrote {paths['csv']}")


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8008, show_default=True)
@click.option("--t2m", "t2m_spec", default="toy", show_default=True,
              help="Prompt segmenter: toy, fixture:<path>, or http(s):<url>.")
@click.option("--backbone", "backbone_spec", default="toy", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--snapshot-dir", default=None, help="Directory for session snapshots.")
@cli_errors
def cmd_serve(host, port, t2m_spec, backbone_spec, seed, snapshot_dir):
    """Run the interactive-control HTTP service."""
    import uvicorn

    from .service import create_app

    app = create_app(
        t2m=make_t2m_client(t2m_spec),
        backbone_factory=lambda s: _make_backbone(backbone_spec, s),
        default_seed=seed,
        snapshot_dir=snapshot_dir,
    )
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command("demo")
@click.option("--out", "out_dir", required=True, help="Where to write the demo sample.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--size", type=int, default=64, show_default=True)
@click.option("--with-distractor", is_flag=True, default=False)
@cli_errors
def cmd_demo(out_dir, seed, size, with_distractor):
    """Generate a synthetic scene with masks, labels, and ground truth."""
    scene = generate_scene(seed, size=size, with_distractor=with_distractor)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_image(scene.image, out / "scene.png")
    save_image(scene.gt_background, out / "gt_background.png")
    save_binary_mask(scene.target_mask, out / "target_mask.png")
    save_label_mask(scene.label_map, out / "label_mask.png")
    manifest_row = {
        "sample_id": f"scene-{seed}",
        "image": "scene.png",
        "label_mask": "label_mask.png",
    }
    (out / "manifest.jsonl").write_text(canonical_json(manifest_row) + "\n", encoding="utf-8")
    meta = {"background_tags": scene.background_tags, "seed": seed, "size": size}
    (out / "scene_meta.json").write_text(canonical_json(meta) + "\n", encoding="utf-8")
    click.echo(f"wrote demo sample to {out}")


if __name__ == "__main__":
    main()
