"""Experiment orchestration: manifest evaluation and resumable sweeps.

A sweep plan is a grid of (rank, iterations, scene seed) cells. Each
cell runs adaptation plus sampling on its own backbone instance and
writes a self-contained directory (trace, result image, metrics, loss
figure, done marker). Completed cells are skipped on rerun by config
digest, and the final report files depend only on the cell outputs, so
interrupted and uninterrupted runs produce identical reports.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import ToyBackbone, sample_removal
from .errors import InputValidationError
from .figures import render_comparison, render_loss_curves, render_sweep_heatmap
from .io import canonical_json, iter_manifest, load_image, load_label_mask, save_image
from .metrics import MetricsReport, ToyFeatureExtractor, compute_sample_metrics
from .scene import generate_scene
from .tta import TtaConfig, run_tta

ingest_manifest = iter_manifest

SWEEP_RANKS = (16, 32, 64, 128)
SWEEP_ITERATIONS = (100, 200, 300, 400, 500)


@dataclass(frozen=True)
class PlanCell:
    cell_id: str
    config: TtaConfig
    scene_seed: int

    def digest(self) -> str:
        doc = {"cell_id": self.cell_id, "config": self.config.to_dict(),
               "scene_seed": self.scene_seed}
        return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


@dataclass
class ExperimentPlan:
    cells: list[PlanCell]
    out_dir: Path

    @classmethod
    def sweep(
        cls,
        out_dir: str | Path,
        ranks=SWEEP_RANKS,
        iteration_counts=SWEEP_ITERATIONS,
        scene_seeds=(0,),
        base_config: TtaConfig = TtaConfig(),
    ) -> "ExperimentPlan":
        cells = []
        for seed in scene_seeds:
            for rank in ranks:
                for iters in iteration_counts:
                    cfg = base_config.with_overrides(rank=rank, iterations=iters)
                    cells.append(
                        PlanCell(
                            cell_id=f"seed{seed}_rank{rank}_iters{iters}",
                            config=cfg,
                            scene_seed=seed,
                        )
                    )
        return cls(cells=cells, out_dir=Path(out_dir))


def run_cell(cell: PlanCell, out_dir: Path) -> dict:
    """Execute one cell start to finish and write its artifact directory."""
    cell_dir = out_dir / cell.cell_id
    cell_dir.mkdir(parents=True, exist_ok=True)

    scene = generate_scene(cell.scene_seed)
    backbone = ToyBackbone(seed=cell.config.seed)
    lora, trace = run_tta(backbone, scene, scene.image, cell.config)
    result = sample_removal(
        backbone,
        backbone.encode(scene.image),
        scene.background_tags,
        strength=cell.config.strength,
        steps=cell.config.sample_steps,
        seed=cell.config.seed,
    )

    extractor = ToyFeatureExtractor(seed=0)
    row = compute_sample_metrics(
        scene.image, result, scene.label_map, extractor, ground_truth=scene.gt_background
    )
    row.update(
        {
            "sample_id": cell.cell_id,
            "rank": cell.config.rank,
            "iterations": cell.config.iterations,
            "scene_seed": cell.scene_seed,
            "l_total_final": trace.records[-1]["l_total"],
        }
    )

    save_image(result, cell_dir / "result.png")
    trace.write_jsonl(cell_dir / "trace.jsonl")
    lora.save(cell_dir / "adapters.bin")
    render_loss_curves(trace.records, cell_dir / "loss_curve.png")
    render_comparison(scene.image, result, cell_dir / "comparison.png", scene.gt_background)
    (cell_dir / "metrics.json").write_text(canonical_json(row) + "\n", encoding="utf-8")
    (cell_dir / "done.json").write_text(
        canonical_json({"digest": cell.digest(), "wall_clock": trace.wall_clock}) + "\n",
        encoding="utf-8",
    )
    return row


def _load_completed(cell: PlanCell, out_dir: Path) -> dict | None:
    done = out_dir / cell.cell_id / "done.json"
    metrics = out_dir / cell.cell_id / "metrics.json"
    if not (done.is_file() and metrics.is_file()):
        return None
    try:
        marker = json.loads(done.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return None
    if marker.get("digest") != cell.digest():
        return None
    return json.loads(metrics.read_text(encoding="utf-8"))


def run_experiment(plan: ExperimentPlan, workers: int = 1) -> dict[str, Path]:
    """Run all pending cells and assemble the sweep report files."""
    plan.out_dir.mkdir(parents=True, exist_ok=True)
    rows: dict[str, dict] = {}
    pending: list[PlanCell] = []
    for cell in plan.cells:
        row = _load_completed(cell, plan.out_dir)
        if row is None:
            pending.append(cell)
        else:
            rows[cell.cell_id] = row

    if pending:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for cell, row in zip(
                    pending, pool.map(lambda c: run_cell(c, plan.out_dir), pending)
                ):
                    rows[cell.cell_id] = row
        else:
            for cell in pending:
                rows[cell.cell_id] = run_cell(cell, plan.out_dir)

    ordered = [rows[c.cell_id] for c in plan.cells]
    paths = {
        "csv": plan.out_dir / "sweep.csv",
        "json": plan.out_dir / "sweep.json",
    }
    _write_sweep_csv(ordered, paths["csv"])
    paths["json"].write_text(canonical_json({"cells": ordered}) + "\n", encoding="utf-8")

    heatmap = _maybe_render_heatmap(plan, rows)
    if heatmap is not None:
        paths["heatmap"] = heatmap
    return paths


_SWEEP_COLUMNS = [
    ("sample_id", "cell_id"),
    ("rank", "rank"),
    ("iterations", "iterations"),
    ("scene_seed", "scene_seed"),
    ("bg_sim", "BG Sim."),
    ("fg_sim", "FG Sim."),
    ("bg_pres", "BG Pres."),
    ("psnr", "PSNR"),
    ("ssim", "SSIM"),
    ("l_total_final", "l_total_final"),
]


def _write_sweep_csv(rows: list[dict], path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([header for _, header in _SWEEP_COLUMNS])
        for row in rows:
            writer.writerow([MetricsReport._fmt(row.get(key)) for key, _ in _SWEEP_COLUMNS])


def _maybe_render_heatmap(plan: ExperimentPlan, rows: dict[str, dict]) -> Path | None:
    ranks = sorted({c.config.rank for c in plan.cells})
    iters = sorted({c.config.iterations for c in plan.cells})
    seeds = {c.scene_seed for c in plan.cells}
    if len(ranks) < 2 and len(iters) < 2:
        return None
    grid = np.full((len(ranks), len(iters)), np.nan)
    for cell in plan.cells:
        row = rows[cell.cell_id]
        i, j = ranks.index(cell.config.rank), iters.index(cell.config.iterations)
        value = row.get("bg_sim")
        if value is not None:
            if np.isnan(grid[i, j]):
                grid[i, j] = 0.0
            grid[i, j] += value / len(seeds)
    path = plan.out_dir / "sweep_heatmap.png"
    render_sweep_heatmap(ranks, iters, grid, "BG Sim. (mean over scenes)", path)
    return path


def evaluate_manifest(
    manifest_path: str | Path,
    pred_dir: str | Path | None = None,
    extractor=None,
    perceptual=None,
) -> tuple[MetricsReport, bool]:
    """Score predictions against a manifest; flags missing predictions.

    Prediction lookup order: the manifest row's ``result`` path, then
    ``pred_dir/<sample_id>.png``. Returns (report, any_missing).
    """
    extractor = extractor or ToyFeatureExtractor(seed=0)
    rows = []
    missing = False
    for entry in ingest_manifest(manifest_path):
        image = load_image(entry.image_path)
        labels = load_label_mask(entry.label_mask_path)
        if labels.shape != image.shape[:2]:
            raise InputValidationError(
                f"{entry.sample_id}: label mask shape {labels.shape} does not match image"
            )
        pred_path = entry.result_path
        if pred_path is None and pred_dir is not None:
            candidate = Path(pred_dir) / f"{entry.sample_id}.png"
            pred_path = candidate if candidate.is_file() else None
        if pred_path is None or not Path(pred_path).is_file():
            missing = True
            rows.append(
                {
                    "sample_id": entry.sample_id,
                    "bg_sim": None,
                    "fg_sim": None,
                    "bg_pres": None,
                    "psnr": None,
                    "ssim": None,
                    "lpips": None,
                    "status": "absent",
                }
            )
            continue
        prediction = load_image(pred_path)
        row = compute_sample_metrics(
            image, prediction, labels, extractor, perceptual=perceptual
        )
        row["sample_id"] = entry.sample_id
        rows.append(row)
    return MetricsReport(rows=rows), missing
