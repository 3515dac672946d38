"""Command line entry point.

Subcommands map one-to-one onto the library layers: process renders raws
through pipeline configs, synth / forensics / optimize run the drift
controls, gradcheck validates pipeline gradients against finite
differences, and fetch downloads a manifest-described dataset.

Every run reads a strict JSON config (unknown keys are errors), writes a
resolved copy of the effective config plus a timestamp-free run log next
to its outputs, and is a pure function of (config, inputs, seed). Exit
codes: 0 ok, 2 config error, 3 I/O error, 4 numeric abort, 5 gradient
check failure, 6 checksum mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import ndops
from . import tensor as T
from .controls import (
    CORRUPTION_KINDS,
    ForensicsConfig,
    OptimizationConfig,
    TrainSpec,
    _task_pieces,
    render_param,
    run_drift_optimization,
    run_forensics,
    run_synthesis,
    stratified_folds,
    targets_for,
)
from .models import Adam, train_step
from .param_pipeline import (
    PARAM_GROUPS,
    ParamGroupMask,
    default_params,
    load_params,
    params_to_tensors,
    process_param,
)
from .rawio import (
    ChecksumError,
    DatasetManifest,
    RawImage,
    RawIoError,
    atomic_write_text,
    dump_json,
    load_raw,
    fetch_dataset,
    save_rgb_png,
)
from .reports import (
    write_csv,
    write_forensics_report,
    write_optimization_report,
    write_synthesis_report,
)
from .scenes import KINDS, scene_dataset
from .static_pipeline import config_by_label, enumerate_configs, process_static

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_GRADCHECK = 5
EXIT_CHECKSUM = 6

CACHE_ENV = "RAWDRIFT_CACHE"

_REQUIRED = object()


class ConfigError(Exception):
    pass


def _strict(section, name: str, known: dict):
    """Apply defaults and reject unknown or missing keys."""
    if section is None:
        section = {}
    if not isinstance(section, dict):
        raise ConfigError(f"{name}: expected an object")
    unknown = sorted(set(section) - set(known))
    if unknown:
        raise ConfigError(f"{name}: unknown keys {unknown}")
    out = {}
    for key, default in known.items():
        if key in section:
            out[key] = section[key]
        elif default is _REQUIRED:
            raise ConfigError(f"{name}: missing required key {key!r}")
        else:
            out[key] = default
    return out


def load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


_SCENE_KEYS = {
    "disks": ("n_disks", "radius"),
    "stripes": ("period", "angle", "contrast"),
    "gradient": ("angle",),
    "noise-texture": ("sigma", "sigma_x"),
}


def load_dataset(section, run_seed: int) -> tuple[list[RawImage], dict]:
    """Returns (raws, normalized data section for the resolved config)."""
    data = _strict(section, "data", {
        "source": "synth", "specs": None, "count_per_spec": 16, "size": 32,
        "seed": None, "dir": None,
    })
    data["seed"] = run_seed if data["seed"] is None else int(data["seed"])
    if data["source"] == "synth":
        if not data["specs"]:
            raise ConfigError("data: synth source needs a non-empty 'specs' list")
        for i, spec in enumerate(data["specs"]):
            if not isinstance(spec, dict):
                raise ConfigError(f"data.specs[{i}]: expected an object")
            kind = spec.get("kind")
            if kind not in KINDS:
                raise ConfigError(f"data.specs[{i}]: unknown kind {kind!r}")
            allowed = set(_SCENE_KEYS[kind]) | {"kind", "label"}
            extra = sorted(set(spec) - allowed)
            if extra:
                raise ConfigError(f"data.specs[{i}]: unknown keys {extra}")
        size = int(data["size"])
        if size < 8 or size % 2:
            raise ConfigError("data: size must be an even integer >= 8")
        raws = scene_dataset(data["specs"], int(data["count_per_spec"]),
                             size=size, seed=data["seed"])
        return raws, data
    if data["source"] == "pgm":
        if not data["dir"]:
            raise ConfigError("data: pgm source needs 'dir'")
        names = sorted(n for n in os.listdir(data["dir"]) if n.endswith(".pgm"))
        if not names:
            raise ConfigError(f"data: no .pgm files under {data['dir']}")
        return [load_raw(os.path.join(data["dir"], n)) for n in names], data
    raise ConfigError(f"data: unknown source {data['source']!r}")


def _train_spec(section) -> TrainSpec:
    t = _strict(section, "train", {
        "steps": 500, "batch": 8, "lr": 0.01, "optimizer": "adam",
        "width": (8, 16),
    })
    return TrainSpec(steps=int(t["steps"]), batch=int(t["batch"]),
                     lr=float(t["lr"]), optimizer=t["optimizer"],
                     width=tuple(t["width"]))


def _spec_doc(train: TrainSpec) -> dict:
    doc = dataclasses.asdict(train)
    doc["width"] = list(train.width)
    return doc


def _group_mask(groups) -> ParamGroupMask:
    if groups in (None, "all"):
        return ParamGroupMask.all()
    try:
        return ParamGroupMask.of(*groups)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _prepare_run_dir(outdir: str, resolved: dict, log_lines: list[str]) -> None:
    os.makedirs(outdir, exist_ok=True)
    atomic_write_text(os.path.join(outdir, "resolved_config.json"),
                      dump_json(resolved))
    atomic_write_text(os.path.join(outdir, "run.log"),
                      "".join(line + "\n" for line in log_lines))


def _out_dir(cfg_value, args) -> str:
    out = args.out or cfg_value
    if not out:
        raise ConfigError("no output directory: set 'out' or pass --out")
    return out


def _seed(cfg_value, args) -> int:
    return int(args.seed if args.seed is not None else cfg_value)


# --- process ----------------------------------------------------------------

def cmd_process(args) -> int:
    doc = load_config(args.config)
    cfg = _strict(doc, "config", {
        "data": _REQUIRED, "configs": "all", "params": None, "stages": False,
        "out": None, "seed": 0,
    })
    seed = _seed(cfg["seed"], args)
    outdir = _out_dir(cfg["out"], args)
    raws, data = load_dataset(cfg["data"], seed)
    if cfg["configs"] == "all":
        configs = enumerate_configs()
    else:
        try:
            configs = [config_by_label(lbl) for lbl in cfg["configs"]]
        except ValueError as e:
            raise ConfigError(str(e)) from e
    theta = load_params(cfg["params"]) if cfg["params"] else None
    os.makedirs(outdir, exist_ok=True)
    written = skipped = 0
    lines = [f"process: {len(raws)} raws, {len(configs)} configs",
             f"config labels: {' '.join(c.label.replace(',', '-') for c in configs)}"]

    def emit(path, render):
        nonlocal written, skipped
        if os.path.exists(path) and not args.force:
            skipped += 1
            return
        save_rgb_png(path, render())
        written += 1

    for i, raw in enumerate(raws):
        stem = f"raw{i:03d}"
        for config in configs:
            base = os.path.join(outdir, f"{stem}_{config.slug}")
            if cfg["stages"]:
                view, stages = process_static(raw.mosaic, config, cfa=raw.cfa,
                                              return_stages=True)
                emit(base + ".png", lambda v=view: v)
                for sname, sval in stages.items():
                    if sval.ndim == 3:
                        emit(f"{base}_{sname}.png",
                             lambda v=sval: np.clip(v, 0.0, 1.0))
            else:
                emit(base + ".png",
                     lambda r=raw, c=config: process_static(r.mosaic, c,
                                                            cfa=r.cfa))
        if theta is not None:
            view = render_param(raw.mosaic[None], theta, cfa=raw.cfa)[0]
            emit(os.path.join(outdir, f"{stem}_param.png"),
                 lambda v=view: np.clip(v, 0.0, 1.0))
    print(f"process: wrote {written}, kept {skipped}", file=sys.stderr)
    resolved = dict(cfg, data=data, seed=seed, out=outdir, command="process")
    _prepare_run_dir(outdir, resolved, lines)
    return EXIT_OK


# --- synth ------------------------------------------------------------------

def cmd_synth(args) -> int:
    doc = load_config(args.config)
    cfg = _strict(doc, "config", {
        "data": _REQUIRED, "task": "classify", "folds": 3, "train": None,
        "corruptions": list(CORRUPTION_KINDS), "corruption_severity": 3,
        "out": None, "seed": 0,
    })
    seed = _seed(cfg["seed"], args)
    outdir = _out_dir(cfg["out"], args)
    raws, data = load_dataset(cfg["data"], seed)
    train = _train_spec(cfg["train"])
    if cfg["task"] not in ("classify", "segment"):
        raise ConfigError(f"unknown task {cfg['task']!r}")
    for kind in cfg["corruptions"]:
        if kind not in CORRUPTION_KINDS:
            raise ConfigError(f"unknown corruption kind {kind!r}")
    report = run_synthesis(
        raws, task=cfg["task"], folds=int(cfg["folds"]), seed=seed,
        train=train, corruptions=tuple(cfg["corruptions"]),
        corruption_severity=int(cfg["corruption_severity"]),
        threads=max(1, args.threads))
    os.makedirs(outdir, exist_ok=True)
    paths = write_synthesis_report(report, outdir)
    lines = [
        f"synth: task {report.task}, {report.folds} folds, seed {seed}",
        f"diagonal mean {report.diagonal_mean()!r}",
        f"off-diagonal mean {report.off_diagonal_mean()!r}",
        f"worst pair {report.worst_pair[0]} -> {report.worst_pair[1]}",
    ] + [f"wrote {os.path.basename(p)}" for p in paths]
    resolved = dict(cfg, data=data, train=_spec_doc(train),
                    seed=seed, out=outdir, command="synth",
                    threads=max(1, args.threads))
    _prepare_run_dir(outdir, resolved, lines)
    return EXIT_OK


# --- forensics ----------------------------------------------------------------

def cmd_forensics(args) -> int:
    doc = load_config(args.config)
    cfg = _strict(doc, "config", {
        "data": _REQUIRED, "task": "classify", "train": None,
        "forensics": None, "out": None, "seed": 0,
    })
    fx = _strict(cfg["forensics"], "forensics", {
        "lambdas": list(ForensicsConfig().lambdas),
        "steps": 20, "lr": 0.01, "groups": "all", "standardize": False,
    })
    seed = _seed(cfg["seed"], args)
    outdir = _out_dir(cfg["out"], args)
    raws, data = load_dataset(cfg["data"], seed)
    train = _train_spec(cfg["train"])
    task = cfg["task"]
    if task not in ("classify", "segment"):
        raise ConfigError(f"unknown task {task!r}")
    loss = "cross_entropy" if task == "classify" else "bce_dice"
    fconfig = ForensicsConfig(
        lambdas=tuple(float(x) for x in fx["lambdas"]),
        steps=int(fx["steps"]), lr=float(fx["lr"]),
        mask=_group_mask(fx["groups"]), loss=loss,
        standardize=bool(fx["standardize"]), seed=seed)

    mosaics = np.stack([r.mosaic for r in raws])
    labels = targets_for(raws, "classify")
    targets = targets_for(raws, task)
    fit_idx, held_idx = stratified_folds(labels, 2)[0]
    model, loss_kind, _metric = _task_pieces(task, train.width,
                                             len(np.unique(labels)))
    views = render_param(mosaics[fit_idx], default_params(), cfa=raws[0].cfa,
                         standardize=fconfig.standardize)
    params = model.init_params(seed)
    opt = train.make_optimizer()
    rng = np.random.default_rng(seed)
    for _ in range(train.steps):
        idx = rng.integers(0, len(fit_idx), size=min(train.batch, len(fit_idx)))
        train_step(model, params, opt, views[idx], targets[fit_idx][idx],
                   loss_kind)
    report = run_forensics(model, params,
                           (mosaics[fit_idx], targets[fit_idx]),
                           (mosaics[held_idx], targets[held_idx]),
                           fconfig, cfa=raws[0].cfa)
    os.makedirs(outdir, exist_ok=True)
    paths = write_forensics_report(report, outdir)
    lines = [f"forensics: task {task}, seed {seed}",
             f"baseline score {report.baseline_score!r}"]
    for row in report.rows:
        lines.append(f"lambda {row.lam:g}: score {row.score!r} "
                     f"l2 {row.l2!r}"
                     + (f" aborted at {row.aborted_at}"
                        if row.aborted_at is not None else ""))
    lines += [f"wrote {os.path.basename(p)}" for p in paths]
    resolved = dict(cfg, data=data,
                    forensics=dict(fx, lambdas=list(fconfig.lambdas)),
                    train=_spec_doc(train),
                    seed=seed, out=outdir, command="forensics")
    _prepare_run_dir(outdir, resolved, lines)
    return EXIT_OK


# --- optimize -----------------------------------------------------------------

def cmd_optimize(args) -> int:
    doc = load_config(args.config)
    cfg = _strict(doc, "config", {
        "data": _REQUIRED, "modes": list(("learned", "frozen", "direct_raw")),
        "optimization": None, "out": None, "seed": 0,
    })
    op = _strict(cfg["optimization"], "optimization", {
        "task": "classify", "steps": 200, "folds": 3, "batch": 8,
        "lr": 0.01, "pipeline_lr": 1e-3, "groups": "all", "intensity": 1.0,
        "standardize": True, "eval_every": 1, "width": (8, 16),
    })
    seed = _seed(cfg["seed"], args)
    outdir = _out_dir(cfg["out"], args)
    raws, data = load_dataset(cfg["data"], seed)
    try:
        oconfig = OptimizationConfig(
            task=op["task"], steps=int(op["steps"]), folds=int(op["folds"]),
            batch=int(op["batch"]), lr=float(op["lr"]),
            pipeline_lr=float(op["pipeline_lr"]),
            mask=_group_mask(op["groups"]),
            intensity=float(op["intensity"]),
            standardize=bool(op["standardize"]),
            eval_every=int(op["eval_every"]), width=tuple(op["width"]))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    runs = []
    for mode in cfg["modes"]:
        try:
            runs.append(run_drift_optimization(raws, mode, oconfig, seed=seed))
        except ValueError as e:
            raise ConfigError(str(e)) from e
    os.makedirs(outdir, exist_ok=True)
    paths = write_optimization_report(runs, outdir)
    lines = [f"optimize: task {oconfig.task}, seed {seed}, "
             f"intensity {oconfig.intensity:g}"]
    for run in runs:
        lines.append(f"{run.mode}: mean {run.summary_mean!r} "
                     f"+- {run.summary_std!r}, final {run.final_mean!r}")
    lines += [f"wrote {os.path.basename(p)}" for p in paths]
    resolved = dict(cfg, data=data,
                    optimization=dict(op, width=list(op["width"])),
                    seed=seed, out=outdir, command="optimize")
    _prepare_run_dir(outdir, resolved, lines)
    return EXIT_OK


# --- gradcheck ----------------------------------------------------------------

def _smooth_raw(size: int, seed: int) -> np.ndarray:
    """Random raw whose rendered values stay away from the clip edges."""
    rng = np.random.default_rng(seed)
    raw = ndops.gaussian_blur(rng.uniform(0.3, 0.7, (size, size))[None],
                              1.0, mode="reflect")[0]
    return np.clip(raw, 0.05, 0.95)


def _gradcheck_once(raw: np.ndarray, tolerance: float, fault):
    theta = default_params()
    tape = T.Tape(dtype=np.float64, fault=fault)
    ptheta = params_to_tensors(tape, theta, ParamGroupMask.all())
    leaf = tape.leaf(raw, trainable=True)
    loss = T.sq_l2(process_param(leaf, ptheta))
    grads = tape.backward(loss)

    def loss_for(name):
        def f(arr):
            probe = theta.copy()
            if name == "raw_input":
                x = arr
            else:
                setattr(probe, name, arr.reshape(getattr(theta, name).shape))
                x = raw
            t2 = T.Tape(dtype=np.float64)
            return float(T.sq_l2(process_param(
                t2.leaf(x), params_to_tensors(t2, probe))).values)
        return f

    rows = {}
    for name in PARAM_GROUPS:
        fd = T.finite_diff_grad(loss_for(name), getattr(theta, name))
        rows[name] = T.max_rel_error(grads[ptheta[name]], fd)
    fd = T.finite_diff_grad(loss_for("raw_input"), raw)
    rows["raw_input"] = T.max_rel_error(grads[leaf], fd)
    return rows


def cmd_gradcheck(args) -> int:
    doc = load_config(args.config) if args.config else {}
    cfg = _strict(doc, "config", {
        "count": 20, "size": 16, "tolerance": 1e-4, "seed": 0,
        "fault": None, "out": None,
    })
    seed = _seed(cfg["seed"], args)
    fault = None
    if cfg["fault"] is not None:
        f = _strict(cfg["fault"], "fault", {"op": _REQUIRED, "factor": 2.0})
        fault = (f["op"], float(f["factor"]))
    tolerance = float(cfg["tolerance"])
    worst = {name: 0.0 for name in (*PARAM_GROUPS, "raw_input")}
    for i in range(int(cfg["count"])):
        raw = _smooth_raw(int(cfg["size"]), seed * 10_000 + i)
        for name, err in _gradcheck_once(raw, tolerance, fault).items():
            # np.maximum propagates NaN where builtin max would drop it
            worst[name] = float(np.maximum(worst[name], err))
    failed = [n for n, e in worst.items() if not e <= tolerance]
    rows = [[name, worst[name], tolerance,
             "FAIL" if name in failed else "PASS"] for name in worst]
    for name, err, tol, status in rows:
        print(f"{name:18s} max_rel_err {err:.3e} tol {tol:.1e} {status}")
    outdir = args.out or cfg["out"]
    if outdir:
        os.makedirs(outdir, exist_ok=True)
        write_csv(os.path.join(outdir, "gradcheck.csv"),
                  ["group", "max_rel_err", "tolerance", "status"], rows)
        resolved = dict(cfg, seed=seed, out=outdir, command="gradcheck")
        _prepare_run_dir(outdir, resolved,
                         [f"gradcheck: {len(rows)} rows, "
                          f"{len(failed)} failures"])
    return EXIT_GRADCHECK if failed else EXIT_OK


# --- fetch --------------------------------------------------------------------

def cmd_fetch(args) -> int:
    doc = load_config(args.config)
    cfg = _strict(doc, "config", {
        "manifest": _REQUIRED, "dest": None, "out": None, "seed": 0,
    })
    dest = (cfg["dest"] or os.environ.get(CACHE_ENV)
            or os.path.join(os.path.expanduser("~"), ".cache", "rawdrift"))
    manifest = DatasetManifest.load(cfg["manifest"])
    fetch_dataset(manifest, dest, force=args.force,
                  log=lambda msg: print(msg, file=sys.stderr))
    outdir = args.out or cfg["out"]
    if outdir:
        os.makedirs(outdir, exist_ok=True)
        write_csv(os.path.join(outdir, "fetch_report.csv"),
                  ["path", "sha256", "bytes"],
                  [[e.path, e.sha256, e.bytes] for e in manifest.entries])
        resolved = dict(cfg, dest=dest, out=outdir, command="fetch")
        _prepare_run_dir(outdir, resolved,
                         [f"fetch: {len(manifest.entries)} entries verified "
                          f"in {dest}"])
    return EXIT_OK


# --- driver -------------------------------------------------------------------

_COMMANDS = {
    "process": (cmd_process, True),
    "synth": (cmd_synth, True),
    "forensics": (cmd_forensics, True),
    "optimize": (cmd_optimize, True),
    "gradcheck": (cmd_gradcheck, False),
    "fetch": (cmd_fetch, True),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rawdrift",
        description="Differentiable camera pipelines and dataset-drift controls.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_fn, config_required) in _COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", required=config_required,
                       help="path to a JSON run config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=None,
                       help="override the config output directory")
        p.add_argument("--force", action="store_true",
                       help="overwrite existing outputs / re-download")
        p.add_argument("--threads", type=int, default=1,
                       help="process pool size where supported")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    fn = _COMMANDS[args.command][0]
    try:
        return fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ChecksumError as e:
        print(f"checksum error: {e}", file=sys.stderr)
        return EXIT_CHECKSUM
    except RawIoError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
