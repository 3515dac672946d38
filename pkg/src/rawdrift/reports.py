"""Writers turning control reports into CSV, PNG, and JSON files.

All files go through atomic writes. Numbers are serialized with repr so
reruns compare byte-identical and readers get full precision.
"""

from __future__ import annotations

import csv
import io
import os

import numpy as np

from . import figures
from .controls import ForensicsReport, OptimizationRun, SynthesisReport
from .param_pipeline import PARAM_GROUPS, save_params
from .rawio import atomic_write_text, save_rgb_png


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: str, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(x) for x in row])
    atomic_write_text(path, buf.getvalue())


def _matrix_rows(labels, matrix):
    return [[label] + list(row) for label, row in zip(labels, matrix)]


def write_synthesis_report(report: SynthesisReport, outdir: str) -> list[str]:
    """matrix/std/fold CSVs, rankings, corruption columns, diff image."""
    paths = []

    def emit(name, header, rows):
        path = os.path.join(outdir, name)
        write_csv(path, header, rows)
        paths.append(path)

    head = ["train_config"] + report.labels
    emit("matrix.csv", head, _matrix_rows(report.labels, report.matrix))
    emit("matrix_std.csv", head, _matrix_rows(report.labels, report.matrix_std))
    for f in range(report.folds):
        emit(f"matrix_fold{f}.csv", head,
             _matrix_rows(report.labels, report.fold_matrices[f]))
    emit("rankings.csv", ["rank", "train_config", "mean_score"],
         [[i + 1, label, report.matrix[report.labels.index(label)].mean()]
          for i, label in enumerate(report.rankings)])
    if report.corruption_matrix is not None:
        emit("corruption_matrix.csv",
             ["train_config"] + list(report.corruption_kinds),
             _matrix_rows(report.labels, report.corruption_matrix))
    emit("summary.csv",
         ["metric", "folds", "diagonal_mean", "off_diagonal_mean",
          "worst_train", "worst_test", "worst_diff_l2", "worst_diff_max"],
         [[report.metric, report.folds, report.diagonal_mean(),
           report.off_diagonal_mean(), report.worst_pair[0],
           report.worst_pair[1], report.worst_diff.l2, report.worst_diff.max]])
    diff_png = os.path.join(outdir, "worst_pair_diff.png")
    save_rgb_png(diff_png, np.clip(report.worst_diff.per_channel, 0.0, 1.0))
    paths.append(diff_png)
    fig = os.path.join(outdir, "matrix.png")
    figures.save_matrix_figure(report, fig)
    paths.append(fig)
    if report.corruption_matrix is not None:
        cfig = os.path.join(outdir, "corruption.png")
        figures.save_corruption_figure(report, cfig)
        paths.append(cfig)
    dfig = os.path.join(outdir, "worst_pair_diff_panels.png")
    figures.save_diff_figure(report.worst_diff, report.worst_pair, dfig)
    paths.append(dfig)
    return paths


def write_forensics_report(report: ForensicsReport, outdir: str) -> list[str]:
    """Signature rows keyed by (lambda, group), trajectories, snapshots."""
    paths = []
    sig_rows = []
    for row in report.rows:
        for group in PARAM_GROUPS:
            sig_rows.append([row.lam, group, row.signature[group], row.score,
                             row.l2, report.baseline_score,
                             "" if row.aborted_at is None else row.aborted_at])
    sig_path = os.path.join(outdir, "forensics.csv")
    write_csv(sig_path, ["lambda", "group", "theta_drift_l2", "score",
                         "view_l2", "baseline_score", "aborted_at"], sig_rows)
    paths.append(sig_path)
    traj_rows = [[row.lam, step, value]
                 for row in report.rows
                 for step, value in enumerate(row.objective)]
    traj_path = os.path.join(outdir, "objective_trajectories.csv")
    write_csv(traj_path, ["lambda", "step", "objective"], traj_rows)
    paths.append(traj_path)
    for i, row in enumerate(report.rows):
        p = os.path.join(outdir, f"params_lambda{i}.json")
        save_params(p, row.theta)
        paths.append(p)
    fig = os.path.join(outdir, "forensics.png")
    figures.save_forensics_figure(report, fig)
    paths.append(fig)
    return paths


def write_optimization_report(runs: list[OptimizationRun],
                              outdir: str) -> list[str]:
    """Comparison table, per-step trajectories and losses, final params."""
    from .controls import optimization_table
    paths = []
    table_path = os.path.join(outdir, "table.csv")
    write_csv(table_path,
              ["mode", "task", "metric", "intensity", "mean", "std",
               "final_mean", "final_std"],
              [[r["mode"], r["task"], r["metric"], r["intensity"], r["mean"],
                r["std"], r["final_mean"], r["final_std"]]
               for r in optimization_table(runs)])
    paths.append(table_path)
    traj_rows = []
    loss_rows = []
    for run in runs:
        for f in range(run.trajectories.shape[0]):
            for k, step in enumerate(run.eval_steps):
                traj_rows.append([run.mode, f, step, run.trajectories[f, k]])
            for step in range(run.loss_curves.shape[1]):
                loss_rows.append([run.mode, f, step + 1, run.loss_curves[f, step]])
    traj_path = os.path.join(outdir, "trajectories.csv")
    write_csv(traj_path, ["mode", "fold", "step", "metric"], traj_rows)
    paths.append(traj_path)
    loss_path = os.path.join(outdir, "loss_curves.csv")
    write_csv(loss_path, ["mode", "fold", "step", "loss"], loss_rows)
    paths.append(loss_path)
    for run in runs:
        for f, theta in enumerate(run.pipeline_params):
            if theta is not None:
                p = os.path.join(outdir, f"params_{run.mode}_fold{f}.json")
                save_params(p, theta)
                paths.append(p)
    fig = os.path.join(outdir, "optimization.png")
    figures.save_optimization_figure(runs, fig)
    paths.append(fig)
    return paths
