"""Matplotlib figure rendering for run, eval, and sweep reports.

Figures are written next to the delimited output so a report directory
is self-describing: loss curves per adaptation run, a per-sample metric
summary for evaluations, and a rank-by-iterations heatmap for sweeps.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_loss_curves(records: list[dict], path: str | Path) -> None:
    """Loss-term trajectories over adaptation iterations."""
    iterations = [r["iteration"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key, label in (
        ("l_total", "total"),
        ("l_recon", "reconstruction"),
        ("l_puzzle", "puzzle"),
    ):
        ax.plot(iterations, [r[key] for r in records], label=label, linewidth=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    ax.set_title("test-time adaptation losses")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_eval_summary(rows: list[dict], path: str | Path) -> None:
    """Grouped per-sample bars for the three unpaired metrics."""
    samples = [r["sample_id"] for r in rows]
    metrics = ("bg_sim", "fg_sim", "bg_pres")
    x = np.arange(len(samples))
    width = 0.25
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(samples)), 4))
    for i, key in enumerate(metrics):
        vals = [r.get(key) if r.get(key) is not None else np.nan for r in rows]
        ax.bar(x + (i - 1) * width, vals, width, label=key)
    ax.set_xticks(x)
    ax.set_xticklabels(samples, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("score")
    ax.legend(frameon=False)
    ax.set_title("removal metrics per sample")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_sweep_heatmap(
    ranks: list[int],
    iteration_counts: list[int],
    values: np.ndarray,
    metric_name: str,
    path: str | Path,
) -> None:
    """Metric heatmap over the (rank, iterations) sweep grid."""
    fig, ax = plt.subplots(figsize=(1.2 * len(iteration_counts) + 2, 1.0 * len(ranks) + 2))
    im = ax.imshow(values, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(iteration_counts)), [str(i) for i in iteration_counts])
    ax.set_yticks(range(len(ranks)), [str(r) for r in ranks])
    ax.set_xlabel("iterations")
    ax.set_ylabel("rank")
    ax.set_title(metric_name)
    for i in range(len(ranks)):
        for j in range(len(iteration_counts)):
            if np.isfinite(values[i, j]):
                ax.text(j, i, f"{values[i, j]:.3f}", ha="center", va="center",
                        color="white", fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_comparison(input_image, output_image, path: str | Path, gt_image=None) -> None:
    """Side-by-side input / result (/ ground truth) panel."""
    panels = [("input", input_image), ("result", output_image)]
    if gt_image is not None:
        panels.append(("ground truth", gt_image))
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.4))
    if len(panels) == 1:
        axes = [axes]
    for ax, (title, img) in zip(axes, panels):
        ax.imshow(img)
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
