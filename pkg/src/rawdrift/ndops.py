"""Plain-array spatial primitives shared by the static and differentiable paths.

Everything here is forward-only numpy. The autodiff tape wraps these same
functions for its forward passes, which keeps the static pipeline and the
parametrized pipeline numerically identical instead of merely close.
"""

from __future__ import annotations

import numpy as np

# Cache of reflect-padding index maps keyed by (length, pad).
_REFLECT_IDX: dict[tuple[int, int], np.ndarray] = {}


def reflect_index(length: int, pad: int) -> np.ndarray:
    """Index map of size length + 2*pad implementing mirror padding.

    Mirror without repeating the edge sample, matching numpy's "reflect"
    mode: [2, 1, 0, 1, 2, 3, 2, 1] for length 4, pad 2.
    """
    key = (length, pad)
    cached = _REFLECT_IDX.get(key)
    if cached is not None:
        return cached
    if pad >= length:
        raise ValueError(f"pad {pad} too large for axis of length {length}")
    idx = np.arange(-pad, length + pad)
    idx = np.abs(idx)
    over = idx > length - 1
    idx[over] = 2 * (length - 1) - idx[over]
    idx.setflags(write=False)
    _REFLECT_IDX[key] = idx
    return idx


def pad2d(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    """Pad the last two axes by `pad` with zero or reflect boundaries."""
    if pad == 0:
        return x
    if mode == "zero":
        width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
        return np.pad(x, width, mode="constant")
    if mode == "reflect":
        ih = reflect_index(x.shape[-2], pad)
        iw = reflect_index(x.shape[-1], pad)
        return x[..., ih, :][..., :, iw]
    raise ValueError(f"unknown padding mode {mode!r}")


def pad2d_adjoint(g: np.ndarray, shape: tuple[int, ...], pad: int, mode: str) -> np.ndarray:
    """Adjoint of pad2d: routes cotangents on the padded array back to x."""
    if pad == 0:
        return g
    h, w = shape[-2], shape[-1]
    if mode == "zero":
        return g[..., pad:pad + h, pad:pad + w]
    if mode == "reflect":
        ih = reflect_index(h, pad)
        iw = reflect_index(w, pad)
        lead = g.shape[:-2]
        gf = g.reshape((-1,) + g.shape[-2:])
        out = np.zeros((gf.shape[0], h, w), dtype=g.dtype)
        np.add.at(out, (slice(None), ih[:, None], iw[None, :]), gf)
        return out.reshape(lead + (h, w))
    raise ValueError(f"unknown padding mode {mode!r}")


def conv2d_same(x: np.ndarray, kernel: np.ndarray, mode: str = "reflect") -> np.ndarray:
    """Same-size 2d correlation of the last two axes with one small kernel.

    The kernel is applied as written (no flip), matching the conv layers of
    the usual deep-learning toolkits. Kernel sides must be odd.
    """
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d_same requires odd kernel sides")
    pad = kh // 2
    if kw // 2 != pad:
        raise ValueError("conv2d_same requires a square kernel")
    h, w = x.shape[-2], x.shape[-1]
    xp = pad2d(x, pad, mode)
    out = np.zeros(x.shape, dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            k = kernel[i, j]
            if k != 0.0:
                out += k * xp[..., i:i + h, j:j + w]
    return out


def conv1d_axis(x: np.ndarray, taps: np.ndarray, axis: int,
                mode: str = "reflect") -> np.ndarray:
    """Same-size 1-d correlation along one axis with an odd tap vector."""
    taps = np.asarray(taps, dtype=x.dtype)
    radius = len(taps) // 2
    moved = np.moveaxis(x, axis, -1)
    n = moved.shape[-1]
    if mode == "reflect":
        padded = moved[..., reflect_index(n, radius)]
    else:
        width = [(0, 0)] * (moved.ndim - 1) + [(radius, radius)]
        padded = np.pad(moved, width, mode="constant")
    out = np.zeros(moved.shape, dtype=x.dtype)
    for i, tap in enumerate(taps):
        if tap != 0.0:
            out += tap * padded[..., i:i + n]
    return np.moveaxis(out, -1, axis)


def channel_affine(v: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Per-pixel channel mix: out[..., c, y, x] = sum_j M[c, j] * v[..., j, y, x].

    Written as explicit scalar-times-plane sums rather than einsum so every
    pixel goes through the identical float sequence; BLAS-backed paths round
    differently across vector lanes, which breaks exact uniformity.
    """
    rows = []
    for c in range(matrix.shape[0]):
        acc = matrix[c, 0] * v[..., 0, :, :]
        for j in range(1, matrix.shape[1]):
            acc = acc + matrix[c, j] * v[..., j, :, :]
        rows.append(acc)
    return np.stack(rows, axis=-3)


def median3x3(x: np.ndarray, mode: str = "reflect") -> np.ndarray:
    """3x3 median of the last two axes."""
    h, w = x.shape[-2], x.shape[-1]
    xp = pad2d(x, 1, mode)
    windows = [xp[..., i:i + h, j:j + w] for i in range(3) for j in range(3)]
    return np.median(np.stack(windows, axis=0), axis=0)


def gaussian_kernel1d(sigma: float, radius: int) -> np.ndarray:
    """Sampled Gaussian taps normalized to sum exactly 1."""
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(x: np.ndarray, sigma: float, truncate: float = 4.0,
                  mode: str = "reflect") -> np.ndarray:
    """Separable Gaussian blur over the last two axes."""
    radius = max(1, int(truncate * sigma + 0.5))
    k = gaussian_kernel1d(sigma, radius)
    h, w = x.shape[-2], x.shape[-1]
    ih = reflect_index(h, radius) if mode == "reflect" else None
    xp = x[..., ih, :] if ih is not None else np.pad(
        x, [(0, 0)] * (x.ndim - 2) + [(radius, radius), (0, 0)], mode="constant")
    out = np.zeros(x.shape, dtype=x.dtype)
    for i, tap in enumerate(k):
        out += tap * xp[..., i:i + h, :]
    iw = reflect_index(w, radius) if mode == "reflect" else None
    xp = out[..., :, iw] if iw is not None else np.pad(
        out, [(0, 0)] * (x.ndim - 2) + [(0, 0), (radius, radius)], mode="constant")
    out = np.zeros(x.shape, dtype=x.dtype)
    for j, tap in enumerate(k):
        out += tap * xp[..., :, j:j + w]
    return out
