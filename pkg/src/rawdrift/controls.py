"""Dataset-drift controls built on the camera pipelines.

Three experiment families share this module:

* synthesis: train a toy task model on views rendered by each static
  pipeline config and score it against views from every config, next to a
  pixel-corruption baseline;
* forensics: gradient search over pipeline parameters that degrades a
  frozen task model while an l2 leash (weight lambda) ties the attacked
  views to the originals;
* optimization: train the task model with pipeline parameters learned
  jointly, frozen, or bypassed entirely (demosaic-only raw input).

Every run is a pure function of (dataset, seed, hyperparameters); matrix
cells are independent and may run in a process pool.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field

import numpy as np

from . import ndops
from . import tensor as T
from .models import (
    LOSSES,
    Adam,
    Sgd,
    TinyClassifier,
    TinySegmenter,
    evaluate,
    train_step,
)
from .param_pipeline import (
    PARAM_GROUPS,
    ParamGroupMask,
    PipelineParams,
    default_params,
    params_to_tensors,
    process_param,
)
from .rawio import CfaLayout, RawImage
from .static_pipeline import (
    StaticConfig,
    demosaic_bilinear,
    enumerate_configs,
    process_static,
)

CORRUPTION_KINDS = ("gauss_noise", "gauss_blur", "contrast", "brightness", "saturate")

# Per-kind parameter for severities 1..5. Values increase (or for contrast,
# the factor decreases) monotonically so the perturbation norm is
# non-decreasing in severity. These tables are this artifact's own scale;
# parity with any external corruption benchmark is a non-goal.
SEVERITY_PARAMS = {
    "gauss_noise": (0.02, 0.04, 0.08, 0.12, 0.18),  # noise stddev
    "gauss_blur": (0.4, 0.6, 0.9, 1.3, 1.8),        # blur sigma, pixels
    "contrast": (0.75, 0.60, 0.45, 0.30, 0.20),     # scale toward the mean
    "brightness": (0.05, 0.10, 0.15, 0.22, 0.30),   # additive shift
    "saturate": (1.5, 2.0, 3.0, 4.5, 6.0),          # chroma scale
}

_LUMA = np.array([0.299, 0.587, 0.114])


def corrupt_at_level(view: np.ndarray, kind: str, level: float,
                     seed: int = 0) -> np.ndarray:
    """Pixel-space corruption of an RGB view, clipped back to [0, 1].

    view has channels on axis -3 and may carry leading batch axes. The
    noise draw depends only on the seed, so two levels share one noise
    pattern and differ purely in scale; the other kinds are deterministic.
    """
    if kind not in SEVERITY_PARAMS:
        raise ValueError(f"unknown corruption kind {kind!r}")
    v = np.asarray(view, dtype=np.float64)
    if kind == "gauss_noise":
        unit = np.random.default_rng(seed).standard_normal(v.shape)
        out = v + level * unit
    elif kind == "gauss_blur":
        if level == 0.0:
            out = v
        else:
            flat = v.reshape((-1,) + v.shape[-2:])
            out = ndops.gaussian_blur(flat, level, mode="reflect").reshape(v.shape)
    elif kind == "contrast":
        mean = v.mean(axis=(-2, -1), keepdims=True)
        out = (v - mean) * level + mean
    elif kind == "brightness":
        out = v + level
    else:
        luma = np.einsum("...chw,c->...hw", v, _LUMA)[..., None, :, :]
        out = luma + (v - luma) * level
    return np.clip(out, 0.0, 1.0)


def apply_corruption(view: np.ndarray, kind: str, severity: int,
                     seed: int = 0) -> np.ndarray:
    """Corruption at one of the five tabulated severities."""
    if severity not in (1, 2, 3, 4, 5):
        raise ValueError(f"severity must be 1..5, got {severity!r}")
    if kind not in SEVERITY_PARAMS:
        raise ValueError(f"unknown corruption kind {kind!r}")
    return corrupt_at_level(view, kind, SEVERITY_PARAMS[kind][severity - 1], seed)


@dataclass
class ImageDiff:
    """Channel-wise absolute difference between two views."""

    per_channel: np.ndarray
    l2: float
    max: float


def diff_images(a: np.ndarray, b: np.ndarray) -> ImageDiff:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = np.abs(a - b)
    return ImageDiff(per_channel=d, l2=float(np.sqrt((d * d).sum())),
                     max=float(d.max()))


def render_static(raws: list[RawImage], config: StaticConfig) -> np.ndarray:
    """Views (N, 3, H, W) of a raw dataset under one static config."""
    return np.stack([process_static(r.mosaic, config, cfa=r.cfa) for r in raws])


def render_param(mosaics: np.ndarray, theta: PipelineParams,
                 cfa: CfaLayout | None = None, standardize: bool = False,
                 dtype=np.float64) -> np.ndarray:
    """Views of a mosaic batch under pipeline parameters, no gradients."""
    tape = T.Tape(dtype=dtype)
    return process_param(tape.leaf(mosaics), params_to_tensors(tape, theta),
                         cfa=cfa, standardize=standardize).values


def standardize_views(views: np.ndarray) -> np.ndarray:
    """Numpy twin of the pipeline's per-channel output standardization."""
    axes = tuple(i for i in range(views.ndim) if i != views.ndim - 3)
    mu = views.mean(axis=axes, keepdims=True)
    d = views - mu
    std = np.sqrt((d * d).mean(axis=axes, keepdims=True))
    return d / (std + 1e-5)


def targets_for(raws: list[RawImage], task: str) -> np.ndarray:
    if task == "classify":
        return np.array([r.label for r in raws], dtype=np.int64)
    if task == "segment":
        return np.stack([r.mask for r in raws]).astype(np.float64)
    raise ValueError(f"unknown task {task!r}")


def _task_pieces(task: str, width: tuple[int, int], n_classes: int):
    if task == "classify":
        return TinyClassifier(n_classes=n_classes, width=width), "cross_entropy", "accuracy"
    return TinySegmenter(width=width), "bce_dice", "iou"


def _seed_int(*path: int) -> int:
    return int(np.random.SeedSequence(list(path)).generate_state(1)[0])


def stratified_folds(labels: np.ndarray, folds: int):
    """Round-robin per-class split into (train_idx, test_idx) pairs.

    Raises if any fold would miss a class on either side.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    labels = np.asarray(labels)
    assign = np.empty(len(labels), dtype=np.int64)
    for cls in np.unique(labels):
        where = np.flatnonzero(labels == cls)
        if len(where) < 2 * folds:
            raise ValueError(
                f"class {cls}: {len(where)} items cannot fill {folds} folds")
        assign[where] = np.arange(len(where)) % folds
    out = []
    for f in range(folds):
        test = np.flatnonzero(assign == f)
        train = np.flatnonzero(assign != f)
        out.append((train, test))
    return out


@dataclass(frozen=True)
class TrainSpec:
    """Hyperparameters shared by every matrix cell."""

    steps: int = 500
    batch: int = 8
    lr: float = 0.01
    optimizer: str = "adam"
    width: tuple[int, int] = (8, 16)

    def make_optimizer(self):
        if self.optimizer == "adam":
            return Adam(lr=self.lr)
        if self.optimizer == "sgd":
            return Sgd(lr=self.lr)
        raise ValueError(f"unknown optimizer {self.optimizer!r}")


def _fit(model, views: np.ndarray, targets: np.ndarray, spec: TrainSpec,
         loss_kind: str, seed: int) -> dict[str, np.ndarray]:
    params = model.init_params(_seed_int(seed, 0xA11))
    opt = spec.make_optimizer()
    rng = np.random.default_rng(_seed_int(seed, 0xBA7C4))
    n = len(views)
    take = min(spec.batch, n)
    for _ in range(spec.steps):
        idx = rng.integers(0, n, size=take)
        train_step(model, params, opt, views[idx], targets[idx], loss_kind)
    return params


@dataclass
class SynthesisReport:
    labels: list[str]
    matrix: np.ndarray
    matrix_std: np.ndarray
    fold_matrices: np.ndarray
    rankings: list[str]
    worst_pair: tuple[str, str]
    worst_diff: ImageDiff
    corruption_kinds: tuple[str, ...]
    corruption_matrix: np.ndarray | None
    corruption_std: np.ndarray | None
    folds: int
    task: str
    metric: str

    def diagonal_mean(self) -> float:
        return float(np.mean(np.diag(self.matrix)))

    def off_diagonal_mean(self) -> float:
        off = ~np.eye(len(self.labels), dtype=bool)
        return float(self.matrix[off].mean())


_CELL_STATE: dict = {}


def _init_cell_state(views, targets, splits, spec, task, n_classes, seed,
                     corruptions, corruption_severity):
    _CELL_STATE.update(views=views, targets=targets, splits=splits, spec=spec,
                       task=task, n_classes=n_classes, seed=seed,
                       corruptions=corruptions,
                       corruption_severity=corruption_severity)


def _synthesis_row(i: int):
    """All folds for one train config; returns (i, scores, corruption scores)."""
    s = _CELL_STATE
    views, targets, splits = s["views"], s["targets"], s["splits"]
    model, loss_kind, metric = _task_pieces(s["task"], s["spec"].width,
                                            s["n_classes"])
    n_cfg = views.shape[0]
    scores = np.zeros((len(splits), n_cfg))
    corr = np.zeros((len(splits), len(s["corruptions"])))
    for f, (train_idx, test_idx) in enumerate(splits):
        params = _fit(model, views[i][train_idx], targets[train_idx],
                      s["spec"], loss_kind, _seed_int(s["seed"], i, f))
        for j in range(n_cfg):
            scores[f, j] = evaluate(model, params, views[j][test_idx],
                                    targets[test_idx], metric)
        for k, kind in enumerate(s["corruptions"]):
            hurt = apply_corruption(views[i][test_idx], kind,
                                    s["corruption_severity"],
                                    seed=_seed_int(s["seed"], 0xC0, k))
            corr[f, k] = evaluate(model, params, hurt, targets[test_idx], metric)
    return i, scores, corr


def run_synthesis(raws: list[RawImage], task: str = "classify", folds: int = 3,
                  seed: int = 0, train: TrainSpec | None = None,
                  corruptions: tuple[str, ...] = CORRUPTION_KINDS,
                  corruption_severity: int = 3,
                  threads: int = 1) -> SynthesisReport:
    """Train x test score matrix over the twelve static configs.

    Each row trains one model per fold on that config's views and scores
    it on every config's views plus pixel-corrupted copies of its own.
    """
    train = train or TrainSpec()
    configs = enumerate_configs()
    labels = [c.label for c in configs]
    class_labels = targets_for(raws, "classify")
    targets = targets_for(raws, task)
    n_classes = len(np.unique(class_labels))
    views = np.stack([render_static(raws, c) for c in configs])
    splits = stratified_folds(class_labels, folds)
    args = (views, targets, splits, train, task, n_classes, seed,
            tuple(corruptions), corruption_severity)
    rows = range(len(configs))
    if threads > 1:
        with concurrent.futures.ProcessPoolExecutor(
                max_workers=threads, initializer=_init_cell_state,
                initargs=args) as pool:
            results = list(pool.map(_synthesis_row, rows))
    else:
        _init_cell_state(*args)
        results = [_synthesis_row(i) for i in rows]
    fold_matrices = np.zeros((folds, len(configs), len(configs)))
    corr_folds = np.zeros((folds, len(configs), len(corruptions)))
    for i, scores, corr in results:
        fold_matrices[:, i, :] = scores
        corr_folds[:, i, :] = corr
    matrix = fold_matrices.mean(axis=0)
    row_avg = matrix.mean(axis=1)
    order = np.argsort(-row_avg, kind="stable")
    worst = np.unravel_index(np.argmin(matrix), matrix.shape)
    diff = diff_images(views[worst[0]][0], views[worst[1]][0])
    has_corr = len(corruptions) > 0
    return SynthesisReport(
        labels=labels,
        matrix=matrix,
        matrix_std=fold_matrices.std(axis=0),
        fold_matrices=fold_matrices,
        rankings=[labels[k] for k in order],
        worst_pair=(labels[worst[0]], labels[worst[1]]),
        worst_diff=diff,
        corruption_kinds=tuple(corruptions),
        corruption_matrix=corr_folds.mean(axis=0) if has_corr else None,
        corruption_std=corr_folds.std(axis=0) if has_corr else None,
        folds=folds,
        task=task,
        metric="accuracy" if task == "classify" else "iou",
    )


@dataclass(frozen=True)
class ForensicsConfig:
    """Adversarial search settings; lambdas and steps must be non-negative."""

    lambdas: tuple[float, ...] = (0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 1e2, 1e6)
    steps: int = 20
    lr: float = 1e-2
    mask: ParamGroupMask = field(default_factory=ParamGroupMask.all)
    loss: str = "cross_entropy"
    standardize: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if any(lam < 0 for lam in self.lambdas):
            raise ValueError("lambda weights must be non-negative")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class ForensicsRow:
    lam: float
    score: float
    l2: float
    objective: list[float]
    theta: PipelineParams
    signature: dict[str, float]
    aborted_at: int | None = None


@dataclass
class ForensicsReport:
    baseline_score: float
    baseline_theta: PipelineParams
    rows: list[ForensicsRow]

    def row(self, lam: float) -> ForensicsRow:
        for r in self.rows:
            if r.lam == lam:
                return r
        raise KeyError(f"no row for lambda {lam!r}")


def _mean_sq_l2(a: np.ndarray, b: np.ndarray) -> float:
    d = (a - b).reshape(len(a), -1)
    return float(np.mean((d * d).sum(axis=1)))


def run_forensics(model, model_params: dict[str, np.ndarray],
                  opt_batch: tuple[np.ndarray, np.ndarray],
                  test_batch: tuple[np.ndarray, np.ndarray],
                  config: ForensicsConfig | None = None,
                  baseline: PipelineParams | None = None,
                  cfa: CfaLayout | None = None) -> ForensicsReport:
    """Search pipeline parameters that hurt a frozen task model.

    Minimizes lam * mean-per-image ||V - V~||^2 - loss(V~, Y) over the
    masked parameter groups, starting from the baseline parameters that
    produced V. The reported theta for each lambda is the iterate with the
    lowest objective seen (so the final objective never exceeds the
    initial one), scored on the held-out test batch. A non-finite
    objective aborts that lambda's run at the last valid iterate.
    """
    config = config or ForensicsConfig()
    baseline = (baseline or default_params()).copy()
    raws_opt, y_opt = opt_batch
    raws_test, y_test = test_batch
    metric = "accuracy" if config.loss == "cross_entropy" else "iou"

    v_opt = render_param(raws_opt, baseline, cfa=cfa,
                         standardize=config.standardize)
    v_test = render_param(raws_test, baseline, cfa=cfa,
                          standardize=config.standardize)
    baseline_score = evaluate(model, model_params, v_test, y_test, metric,
                              dtype=np.float64)

    def objective_and_grads(theta: PipelineParams, lam: float):
        tape = T.Tape(dtype=np.float64)
        ptheta = params_to_tensors(tape, theta, config.mask)
        views = process_param(tape.leaf(raws_opt), ptheta, cfa=cfa,
                              standardize=config.standardize)
        mtheta = {k: tape.leaf(v) for k, v in model_params.items()}
        loss = LOSSES[config.loss](model.forward(mtheta, views), y_opt)
        leash = T.scale(T.sq_l2(T.sub(views, v_opt)), lam / len(raws_opt))
        obj = T.sub(leash, loss)
        value = float(obj.values)
        if not np.isfinite(value):
            return value, None
        grads = tape.backward(obj)
        return value, {name: grads[ptheta[name]] for name in config.mask}

    rows = []
    for lam in config.lambdas:
        theta = baseline.copy()
        opt = Adam(lr=config.lr)
        best_theta = theta.copy()
        best_obj = np.inf
        trajectory: list[float] = []
        aborted_at = None
        for step in range(config.steps + 1):
            value, grads = objective_and_grads(theta, lam)
            if grads is None:
                aborted_at = step
                break
            trajectory.append(value)
            if value < best_obj:
                best_obj, best_theta = value, theta.copy()
            if step < config.steps:
                pdict = theta.as_dict()
                opt.step(pdict, grads)
                for name, val in pdict.items():
                    setattr(theta, name, val)
        attacked = render_param(raws_test, best_theta, cfa=cfa,
                                standardize=config.standardize)
        rows.append(ForensicsRow(
            lam=lam,
            score=evaluate(model, model_params, attacked, y_test, metric,
                           dtype=np.float64),
            l2=_mean_sq_l2(v_test, attacked),
            objective=trajectory,
            theta=best_theta,
            signature={name: float(np.linalg.norm(
                getattr(best_theta, name) - getattr(baseline, name)))
                for name in PARAM_GROUPS},
            aborted_at=aborted_at,
        ))
    return ForensicsReport(baseline_score=baseline_score,
                           baseline_theta=baseline, rows=rows)


OPTIMIZATION_MODES = ("learned", "frozen", "direct_raw")


@dataclass(frozen=True)
class OptimizationConfig:
    """Joint data/task training settings shared across modes."""

    task: str = "classify"
    steps: int = 200
    folds: int = 3
    batch: int = 8
    lr: float = 0.01
    pipeline_lr: float = 1e-3
    mask: ParamGroupMask = field(default_factory=ParamGroupMask.all)
    intensity: float = 1.0
    standardize: bool = True
    eval_every: int = 1
    width: tuple[int, int] = (8, 16)

    def __post_init__(self):
        if self.task not in ("classify", "segment"):
            raise ValueError(f"unknown task {self.task!r}")
        if not 0.0 < self.intensity <= 1.0:
            raise ValueError("intensity must be in (0, 1]")


@dataclass
class OptimizationRun:
    mode: str
    task: str
    metric: str
    intensity: float
    eval_steps: list[int]
    trajectories: np.ndarray
    loss_curves: np.ndarray
    summary_mean: float
    summary_std: float
    final_mean: float
    final_std: float
    pipeline_params: list[PipelineParams | None]
    pipeline_changed: bool


def run_drift_optimization(raws: list[RawImage], mode: str,
                           config: OptimizationConfig | None = None,
                           seed: int = 0,
                           start: PipelineParams | None = None) -> OptimizationRun:
    """Train the task model under one pipeline-handling mode.

    learned: pipeline parameters update jointly with the model; frozen:
    they stay fixed at the start values; direct_raw: views are a
    demosaic-only conversion of the raw mosaic and the pipeline is absent.
    The validation metric is recorded on the configured cadence (plus step
    0) and summarized Table-2 style over folds and steps.
    """
    if mode not in OPTIMIZATION_MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {OPTIMIZATION_MODES}")
    config = config or OptimizationConfig()
    cfa = raws[0].cfa
    mosaics = np.stack([r.mosaic for r in raws]) * config.intensity
    class_labels = targets_for(raws, "classify")
    targets = targets_for(raws, config.task)
    model, loss_kind, metric = _task_pieces(
        config.task, config.width, len(np.unique(class_labels)))
    splits = stratified_folds(class_labels, config.folds)

    direct_views = None
    if mode == "direct_raw":
        direct_views = np.stack([demosaic_bilinear(m, cfa) for m in mosaics])

    def val_views(theta, idx):
        if mode == "direct_raw":
            v = direct_views[idx]
            return standardize_views(v) if config.standardize else v
        return render_param(mosaics[idx], theta, cfa=cfa,
                            standardize=config.standardize, dtype=np.float32)

    eval_steps = [0] + [s for s in range(1, config.steps + 1)
                        if s % config.eval_every == 0 or s == config.steps]
    eval_set = set(eval_steps)
    trajectories = np.zeros((config.folds, len(eval_steps)))
    loss_curves = np.zeros((config.folds, config.steps))
    finals: list[PipelineParams | None] = []
    changed = False
    for f, (train_idx, val_idx) in enumerate(splits):
        theta = None if mode == "direct_raw" else (start or default_params()).copy()
        before = None if theta is None else theta.copy()
        params = model.init_params(_seed_int(seed, f, 0xA11))
        opt = Adam(lr=config.lr)
        popt = Adam(lr=config.pipeline_lr) if mode == "learned" else None
        mask = config.mask if mode == "learned" else ParamGroupMask.none()
        rng = np.random.default_rng(_seed_int(seed, f, 0xBA7C4))
        take = min(config.batch, len(train_idx))
        cursor = 0
        trajectories[f, cursor] = evaluate(
            model, params, val_views(theta, val_idx), targets[val_idx], metric)
        for step in range(1, config.steps + 1):
            idx = train_idx[rng.integers(0, len(train_idx), size=take)]
            if mode == "direct_raw":
                batch = direct_views[idx]
                if config.standardize:
                    batch = standardize_views(batch)
                res = train_step(model, params, opt, batch, targets[idx],
                                 loss_kind)
            else:
                res = train_step(model, params, opt, mosaics[idx],
                                 targets[idx], loss_kind,
                                 pipeline_params=theta, pipeline_mask=mask,
                                 pipeline_optimizer=popt, cfa=cfa,
                                 standardize=config.standardize)
            loss_curves[f, step - 1] = res.loss
            if step in eval_set:
                cursor += 1
                trajectories[f, cursor] = evaluate(
                    model, params, val_views(theta, val_idx),
                    targets[val_idx], metric)
        finals.append(theta)
        if before is not None and not all(
                np.array_equal(getattr(before, n), getattr(theta, n))
                for n in PARAM_GROUPS):
            changed = True
    return OptimizationRun(
        mode=mode,
        task=config.task,
        metric=metric,
        intensity=config.intensity,
        eval_steps=eval_steps,
        trajectories=trajectories,
        loss_curves=loss_curves,
        summary_mean=float(trajectories.mean()),
        summary_std=float(trajectories.std()),
        final_mean=float(trajectories[:, -1].mean()),
        final_std=float(trajectories[:, -1].std()),
        pipeline_params=finals,
        pipeline_changed=changed,
    )


def optimization_table(runs: list[OptimizationRun]) -> list[dict]:
    """Comparison rows (one per run) over folds and steps."""
    return [{
        "mode": r.mode,
        "task": r.task,
        "metric": r.metric,
        "intensity": r.intensity,
        "mean": r.summary_mean,
        "std": r.summary_std,
        "final_mean": r.final_mean,
        "final_std": r.final_std,
    } for r in runs]
