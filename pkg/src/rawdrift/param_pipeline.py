"""Parametrized camera pipeline: the static path with every knob exposed.

The seven parameter groups, in stage order:

  black_levels      (4,)      per-site offsets, subtracted without clamping
  demosaic_kernels  (3, 3, 3) one 3x3 kernel per sparse color plane
  wb_gains          (3,)      per-channel gains
  color_matrix      (3, 3)    channel mixing matrix
  sharpen_kernel    (3, 3)    applied to all YUV channels
  blur_kernel       (5, 5)    applied to all YUV channels
  gamma             ()        exponent 1/gamma after clipping into [0, 1]

At the default values the rendering equals the static pipeline configured
as (bilinear, sharp_filter, gaussian) bit for bit: both paths share the
same forward arithmetic. The one intended asymmetry is the black level
stage, which clamps at zero in the static path but stays unconstrained
here so its gradient never dies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .kernels import (DEFAULT_GAMMA, K_BLUR, K_CROSS, K_FULL, K_SHARP,
                      M_RGB_TO_YUV, M_YUV_TO_RGB)
from .rawio import CfaLayout, atomic_write_text, blacklevel_site_map, dump_json
from .static_pipeline import StaticConfig

PARAM_GROUPS = ("black_levels", "demosaic_kernels", "wb_gains", "color_matrix",
                "sharpen_kernel", "blur_kernel", "gamma")
_GROUP_SHAPES = {"black_levels": (4,), "demosaic_kernels": (3, 3, 3),
                 "wb_gains": (3,), "color_matrix": (3, 3),
                 "sharpen_kernel": (3, 3), "blur_kernel": (5, 5), "gamma": ()}
PARAMS_SCHEMA = "pipeline-params/1"


@dataclass
class PipelineParams:
    black_levels: np.ndarray
    demosaic_kernels: np.ndarray
    wb_gains: np.ndarray
    color_matrix: np.ndarray
    sharpen_kernel: np.ndarray
    blur_kernel: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            arr = np.array(getattr(self, f.name), dtype=np.float64)
            if arr.shape != _GROUP_SHAPES[f.name]:
                raise ValueError(f"{f.name}: shape {arr.shape}, "
                                 f"expected {_GROUP_SHAPES[f.name]}")
            setattr(self, f.name, arr)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    @staticmethod
    def from_dict(d: dict) -> "PipelineParams":
        return PipelineParams(**{name: d[name] for name in PARAM_GROUPS})

    def copy(self) -> "PipelineParams":
        return PipelineParams(**{k: v.copy() for k, v in self.as_dict().items()})

    def allclose(self, other: "PipelineParams", atol: float = 0.0) -> bool:
        return all(np.allclose(getattr(self, n), getattr(other, n), atol=atol, rtol=0.0)
                   for n in PARAM_GROUPS)


@dataclass(frozen=True)
class ParamGroupMask:
    """Which parameter groups an optimizer may touch."""

    groups: frozenset

    def __post_init__(self):
        unknown = self.groups - set(PARAM_GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")

    @staticmethod
    def all() -> "ParamGroupMask":
        return ParamGroupMask(frozenset(PARAM_GROUPS))

    @staticmethod
    def none() -> "ParamGroupMask":
        return ParamGroupMask(frozenset())

    @staticmethod
    def of(*names: str) -> "ParamGroupMask":
        return ParamGroupMask(frozenset(names))

    def __contains__(self, name: str) -> bool:
        return name in self.groups

    def __iter__(self):
        return iter(sorted(self.groups))


def default_params() -> PipelineParams:
    """Identity continuous parameters plus the published fixed kernels."""
    return PipelineParams(
        black_levels=np.zeros(4),
        demosaic_kernels=np.stack([K_FULL, K_CROSS, K_FULL]),
        wb_gains=np.ones(3),
        color_matrix=np.eye(3),
        sharpen_kernel=K_SHARP.copy(),
        blur_kernel=K_BLUR.copy(),
        gamma=np.float64(DEFAULT_GAMMA),
    )


def static_equivalence_params(config: StaticConfig | None = None) -> PipelineParams:
    """Parameters that reproduce a static configuration exactly.

    Only the (bilinear, sharp_filter, gaussian) menu point has a
    parametrized twin; other algorithm choices have no kernel form.
    """
    config = config or StaticConfig()
    if (config.demosaic, config.sharpen, config.denoise) != \
            ("bilinear", "sharp_filter", "gaussian"):
        raise ValueError(
            f"no parametrized equivalent for menu point {config.label!r}; "
            "only bi,s,ga has one")
    p = default_params()
    p.black_levels = np.array(config.black_levels, dtype=np.float64)
    p.wb_gains = np.array(config.wb_gains, dtype=np.float64)
    p.color_matrix = np.array(config.color_matrix, dtype=np.float64)
    p.gamma = np.float64(config.gamma)
    return PipelineParams(**p.as_dict())


def params_to_tensors(tape: T.Tape, params: PipelineParams,
                      mask: ParamGroupMask | None = None) -> dict[str, T.Tensor]:
    """Leaf tensors for every group; groups in the mask become trainable."""
    mask = mask or ParamGroupMask.none()
    return {name: tape.leaf(value, trainable=name in mask)
            for name, value in params.as_dict().items()}


def standardize_channels(v: T.Tensor) -> T.Tensor:
    """(x - batch channel mean) / (batch channel std + 1e-5), no affine."""
    nd = v.values.ndim
    axes = tuple(i for i in range(nd) if i != nd - 3)
    mu = T.mean_over(v, axes, keepdims=True)
    d = T.sub(v, mu)
    var = T.mean_over(T.mul(d, d), axes, keepdims=True)
    return T.div(d, T.add(T.sqrt(var), 1e-5))


def process_param(raw, theta, cfa: CfaLayout | None = None,
                  standardize: bool = False) -> T.Tensor:
    """Differentiable rendering of raw mosaics.

    raw is a (h, w) or (n, h, w) array or Tensor with values in [0, 1];
    theta is a PipelineParams (treated as constants on a fresh tape) or a
    dict of tensors from params_to_tensors. Returns the (..., 3, h, w)
    rendering as a Tensor on the tape.
    """
    if isinstance(theta, PipelineParams):
        for name, value in theta.as_dict().items():
            if not np.all(np.isfinite(value)):
                raise ValueError(f"non-finite values in parameter group {name}")
        tape = raw.tape if isinstance(raw, T.Tensor) else T.Tape()
        theta = params_to_tensors(tape, theta)
    else:
        missing = set(PARAM_GROUPS) - set(theta)
        if missing:
            raise ValueError(f"missing parameter groups {sorted(missing)}")
        tape = theta[PARAM_GROUPS[0]].tape
    if not isinstance(raw, T.Tensor):
        raw = tape.leaf(np.asarray(raw, dtype=np.float64))
    rv = raw.values
    if rv.ndim not in (2, 3):
        raise ValueError("raw must be (h, w) or (n, h, w)")
    h, w = rv.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError("mosaic sides must be even")
    if rv.min() < -1e-4 or rv.max() > 1.0 + 1e-4:
        raise ValueError("raw values must lie in [0, 1]")
    cfa = cfa or CfaLayout()

    v = T.sub(raw, T.gather(theta["black_levels"], blacklevel_site_map(h, w)))
    masks = cfa.plane_masks(h, w)
    chans = [T.conv2d(T.mul(v, masks[c]), T.take0(theta["demosaic_kernels"], c),
                      padding="reflect")
             for c in range(3)]
    v = T.stack(chans, axis=-3)
    v = T.mul(v, T.reshape(theta["wb_gains"], (3, 1, 1)))
    v = T.channel_affine(v, theta["color_matrix"])
    v = T.channel_affine(v, M_RGB_TO_YUV)
    v = T.conv2d(v, theta["sharpen_kernel"], padding="reflect")
    v = T.conv2d(v, theta["blur_kernel"], padding="reflect")
    v = T.channel_affine(v, M_YUV_TO_RGB)
    v = T.clip01(v)
    v = T.power(v, T.div(1.0, theta["gamma"]))
    if standardize:
        v = standardize_channels(v)
    return v


def params_to_doc(params: PipelineParams) -> dict:
    doc = {"schema": PARAMS_SCHEMA}
    for name, value in params.as_dict().items():
        doc[name] = value.tolist()
    return doc


def params_from_doc(doc: dict) -> PipelineParams:
    if doc.get("schema") != PARAMS_SCHEMA:
        raise ValueError(f"parameter document schema {doc.get('schema')!r}, "
                         f"expected {PARAMS_SCHEMA!r}")
    return PipelineParams(**{name: np.array(doc[name]) for name in PARAM_GROUPS})


def save_params(path: Path, params: PipelineParams) -> None:
    atomic_write_text(Path(path), dump_json(params_to_doc(params)))


def load_params(path: Path) -> PipelineParams:
    return params_from_doc(json.loads(Path(path).read_text()))
