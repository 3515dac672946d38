"""Synthetic Bayer scenes with known labels and masks.

Each generator renders a small RGB scene, mosaics it through the CFA, and
returns a RawImage whose label (classification) and mask (segmentation)
encode the ground truth. Generation is a pure function of (kind, seed,
parameters); the same call always returns the same bytes.

Mask rules per kind:
  * disks: mask is the union of the disk interiors.
  * stripes: mask is the positive half of the stripe wave.
  * gradient: mask is the bright half of the ramp.
  * noise-texture: mask is the above-median region of the texture field.
"""

from __future__ import annotations

import numpy as np

from . import ndops
from .rawio import CfaLayout, RawImage, mosaic_rgb

KINDS = ("disks", "stripes", "gradient", "noise-texture")
# Pixel values keep away from 0 and 1 so the gamma clip stays inactive and
# quantization noise dominates nothing.
_LO, _HI = 0.08, 0.92


def _rng(kind: str, seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([KINDS.index(kind), seed]))


def _random_colors(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    lo = rng.uniform(_LO, 0.42, 3)
    hi = rng.uniform(0.58, _HI, 3)
    return lo, hi


def _colorize(field: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return lo[:, None, None] + (hi - lo)[:, None, None] * field[None]


def synth_scene(kind: str, size: int = 64, seed: int = 0,
                cfa: CfaLayout | None = None, label: int | None = None,
                **params) -> RawImage:
    """Render one scene and mosaic it down to a RawImage."""
    if kind not in KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; choose from {KINDS}")
    if size % 2:
        raise ValueError("scene size must be even for Bayer sampling")
    cfa = cfa or CfaLayout()
    rng = _rng(kind, seed)
    ys, xs = np.mgrid[0:size, 0:size] / float(size)
    if kind == "disks":
        rgb, mask = _disks(rng, ys, xs, size, **params)
    elif kind == "stripes":
        rgb, mask = _stripes(rng, ys, xs, **params)
    elif kind == "gradient":
        rgb, mask = _gradient(rng, ys, xs, **params)
    else:
        rgb, mask = _noise_texture(rng, size, **params)
    rgb = np.clip(rgb, _LO / 2, 1.0 - _LO / 2)
    return RawImage(mosaic=mosaic_rgb(rgb, cfa), cfa=cfa,
                    label=KINDS.index(kind) if label is None else label,
                    mask=mask,
                    provenance=f"synth:{kind}:{seed}")


def _disks(rng, ys, xs, size, n_disks: int = 3, radius: tuple = (0.10, 0.22)):
    lo, hi = _random_colors(rng)
    bg = 0.5 + 0.2 * (xs - 0.5) * rng.uniform(-1, 1) + 0.2 * (ys - 0.5) * rng.uniform(-1, 1)
    rgb = _colorize(bg, lo, 0.55 + 0.2 * (hi - 0.55))
    mask = np.zeros(ys.shape, dtype=bool)
    for _ in range(n_disks):
        cy, cx = rng.uniform(0.2, 0.8, 2)
        r = rng.uniform(*radius)
        color = rng.uniform(0.55, _HI, 3)
        inside = (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
        mask |= inside
        rgb = np.where(inside[None], color[:, None, None], rgb)
    return rgb, mask


def _stripes(rng, ys, xs, period: float = 6.0, angle: float | None = None,
             contrast: float = 1.0):
    """Oriented sinusoidal stripes; period is in pixels."""
    if angle is None:
        angle = rng.uniform(0.0, np.pi)
    size = ys.shape[0]
    phase = (np.cos(angle) * xs + np.sin(angle) * ys) * size * 2.0 * np.pi / period
    wave = np.sin(phase + rng.uniform(0, 2 * np.pi))
    lo, hi = _random_colors(rng)
    field = 0.5 + 0.5 * contrast * wave
    return _colorize(field, lo, hi), wave > 0


def _gradient(rng, ys, xs, angle: float | None = None):
    if angle is None:
        angle = rng.uniform(0.0, 2 * np.pi)
    ramp = np.cos(angle) * (xs - 0.5) + np.sin(angle) * (ys - 0.5)
    ramp = (ramp - ramp.min()) / (ramp.max() - ramp.min())
    lo, hi = _random_colors(rng)
    return _colorize(ramp, lo, hi), ramp > 0.5


def _noise_texture(rng, size, sigma: float = 2.0, sigma_x: float | None = None):
    """Band-limited noise; unequal sigmas give the texture a grain direction."""
    noise = rng.standard_normal((size, size))
    sy = sigma
    sx = sigma if sigma_x is None else sigma_x
    field = ndops.gaussian_blur(noise[None], sy, mode="reflect")[0] if sy == sx else None
    if field is None:
        field = noise
        for axis, s in ((0, sy), (1, sx)):
            if s > 0:
                radius = max(1, int(4.0 * s + 0.5))
                k = ndops.gaussian_kernel1d(s, radius)
                moved = np.moveaxis(field, axis, -1)
                idx = ndops.reflect_index(moved.shape[-1], radius)
                padded = moved[..., idx]
                acc = np.zeros_like(moved)
                for i, tap in enumerate(k):
                    acc += tap * padded[..., i:i + moved.shape[-1]]
                field = np.moveaxis(acc, -1, axis)
    span = field.max() - field.min()
    field = (field - field.min()) / (span if span > 0 else 1.0)
    lo, hi = _random_colors(rng)
    return _colorize(field, lo, hi), field > np.median(field)


def scene_dataset(specs: list[dict], count_per_spec: int, size: int = 64,
                  seed: int = 0, cfa: CfaLayout | None = None) -> list[RawImage]:
    """Deterministic labeled dataset, count_per_spec scenes per spec.

    Each spec is {"kind": ..., optional "label", optional kind parameters}.
    Labels default to the spec position. Scenes interleave spec-major so a
    prefix of the list is still class-balanced.
    """
    images: list[list[RawImage]] = []
    for s_idx, spec in enumerate(specs):
        spec = dict(spec)
        kind = spec.pop("kind")
        label = spec.pop("label", s_idx)
        rows = []
        for i in range(count_per_spec):
            item_seed = int(np.random.SeedSequence([seed, s_idx, i]).generate_state(1)[0])
            rows.append(synth_scene(kind, size=size, seed=item_seed, cfa=cfa,
                                    label=label, **spec))
        images.append(rows)
    out: list[RawImage] = []
    for i in range(count_per_spec):
        for rows in images:
            out.append(rows[i])
    return out
