"""Matplotlib renderings of control reports.

Figures are written through the Agg backend with fixed savefig metadata so
a rerun with the same inputs produces byte-identical PNGs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .controls import ForensicsReport, ImageDiff, OptimizationRun, SynthesisReport
from .param_pipeline import PARAM_GROUPS

_SAVE = dict(dpi=110, metadata={"Software": "rawdrift"})


def _finish(fig, path: str) -> None:
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def save_matrix_figure(report: SynthesisReport, path: str) -> None:
    """Heatmap of the train x test score matrix."""
    n = len(report.labels)
    fig, ax = plt.subplots(figsize=(7.2, 6.0))
    im = ax.imshow(report.matrix, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(n), report.labels, rotation=90)
    ax.set_yticks(range(n), report.labels)
    ax.set_xlabel("test config")
    ax.set_ylabel("train config")
    ax.set_title(f"{report.metric} over {report.folds} folds")
    for i in range(n):
        for j in range(n):
            ax.text(j, i, f"{report.matrix[i, j]:.2f}", ha="center",
                    va="center", fontsize=5,
                    color="white" if report.matrix[i, j] < 0.6 else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    _finish(fig, path)


def save_corruption_figure(report: SynthesisReport, path: str) -> None:
    """Heatmap of train config x corruption kind scores."""
    if report.corruption_matrix is None:
        raise ValueError("report carries no corruption columns")
    fig, ax = plt.subplots(figsize=(4.8, 6.0))
    im = ax.imshow(report.corruption_matrix, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(report.corruption_kinds)), report.corruption_kinds,
                  rotation=90)
    ax.set_yticks(range(len(report.labels)), report.labels)
    ax.set_xlabel("corruption (severity fixed)")
    ax.set_ylabel("train config")
    ax.set_title(f"{report.metric} under corruption")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    _finish(fig, path)


def save_forensics_figure(report: ForensicsReport, path: str) -> None:
    """Score and view distance against lambda, plus group signatures."""
    rows = report.rows
    xs = np.arange(len(rows))
    ticks = [f"{r.lam:g}" for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.6, 4.2))
    ax1.plot(xs, [r.score for r in rows], marker="o", label="attacked score")
    ax1.axhline(report.baseline_score, ls="--", c="gray", label="baseline")
    ax1.set_xticks(xs, ticks)
    ax1.set_xlabel("lambda")
    ax1.set_ylabel("task score")
    ax1.set_ylim(-0.02, 1.02)
    ax1.legend()
    ax1b = ax1.twinx()
    ax1b.plot(xs, [r.l2 for r in rows], marker="s", c="tab:red")
    ax1b.set_yscale("symlog", linthresh=1e-6)
    ax1b.set_ylabel("mean ||V - V~||^2", color="tab:red")
    sig = np.array([[r.signature[g] for g in PARAM_GROUPS] for r in rows])
    im = ax2.imshow(sig.T, aspect="auto", cmap="magma")
    ax2.set_xticks(xs, ticks)
    ax2.set_yticks(range(len(PARAM_GROUPS)), PARAM_GROUPS)
    ax2.set_xlabel("lambda")
    ax2.set_title("parameter-group drift signature")
    fig.colorbar(im, ax=ax2, fraction=0.046)
    fig.tight_layout()
    _finish(fig, path)


def save_optimization_figure(runs: list[OptimizationRun], path: str) -> None:
    """Validation trajectories (mean with a fold std band) per mode."""
    fig, ax = plt.subplots(figsize=(7.2, 4.2))
    for run in runs:
        xs = np.asarray(run.eval_steps)
        mean = run.trajectories.mean(axis=0)
        std = run.trajectories.std(axis=0)
        label = f"{run.mode} (x{run.intensity:g})"
        line, = ax.plot(xs, mean, marker=".", label=label)
        ax.fill_between(xs, mean - std, mean + std, alpha=0.2,
                        color=line.get_color())
    ax.set_xlabel("step")
    ax.set_ylabel(runs[0].metric if runs else "metric")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    fig.tight_layout()
    _finish(fig, path)


def save_diff_figure(diff: ImageDiff, pair: tuple[str, str], path: str) -> None:
    """Per-channel absolute difference panels for the worst config pair."""
    fig, axes = plt.subplots(1, 3, figsize=(9.6, 3.4))
    vmax = max(diff.max, 1e-12)
    for ax, name, plane in zip(axes, "RGB", diff.per_channel):
        im = ax.imshow(plane, vmin=0.0, vmax=vmax, cmap="inferno")
        ax.set_title(f"|A-B| {name}")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(f"worst pair: trained on {pair[0]}, tested on {pair[1]}")
    fig.colorbar(im, ax=axes, fraction=0.02)
    _finish(fig, path)
