"""Reverse-mode automatic differentiation over dense numpy tensors.

A Tape owns every Tensor created on it and records one node per operation.
Calling Tape.backward(loss) walks the recorded nodes in reverse and returns
a gradient map for the trainable leaves. Tapes are single-owner and cheap;
training code builds a fresh tape per step so parameters stay plain arrays
between steps.

Gradient conventions that matter downstream:
  * clip01 passes gradient through at exactly 0 and 1 (subgradient 1 on the
    closed unit interval, 0 outside).
  * power treats d(v**e)/de as 0 at v == 0 and clamps the base to 1e-12
    inside logs and negative powers so adjoints stay finite.

The forward passes reuse the plain-array helpers in ndops, so a static
computation and a taped computation of the same stage agree bit for bit.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import ndops

_BASE_FLOOR = 1e-12


class Tensor:
    """Immutable value node on a tape."""

    __slots__ = ("values", "tape", "_id", "trainable", "requires_grad")

    def __init__(self, values: np.ndarray, tape: "Tape", tid: int,
                 trainable: bool, requires_grad: bool):
        values.setflags(write=False)
        self.values = values
        self.tape = tape
        self._id = tid
        self.trainable = trainable
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, id={self._id})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Recorder for one forward computation.

    dtype selects working precision: float32 for training loops, float64
    for gradient checking. The fault argument is a test seam: a pair
    (op_name, factor) scales that operation's adjoints so gradient-check
    tooling can prove it catches a broken backward pass.
    """

    def __init__(self, dtype=np.float64, fault: tuple[str, float] | None = None):
        self.dtype = np.dtype(dtype)
        self._tensors: list[Tensor] = []
        self._nodes: dict[int, tuple[tuple[int, ...], Callable]] = {}
        self._trainable: list[Tensor] = []
        self._fault = fault

    def leaf(self, values, trainable: bool = False) -> Tensor:
        arr = np.array(values, dtype=self.dtype)
        t = Tensor(arr, self, len(self._tensors), trainable, trainable)
        self._tensors.append(t)
        if trainable:
            self._trainable.append(t)
        return t

    def _record(self, values: np.ndarray, op: str,
                inputs: Sequence[Tensor],
                backward: Callable[[np.ndarray], tuple] | None) -> Tensor:
        values = np.asarray(values, dtype=self.dtype)
        rg = backward is not None and any(t.requires_grad for t in inputs)
        t = Tensor(values, self, len(self._tensors), False, rg)
        self._tensors.append(t)
        if rg:
            fn = backward
            if self._fault is not None and self._fault[0] == op:
                factor = self._fault[1]
                inner = backward

                def fn(g, _inner=inner, _f=factor):
                    return tuple(None if c is None else c * _f for c in _inner(g))

            self._nodes[t._id] = (tuple(i._id for i in inputs), fn)
        return t

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar loss for every trainable leaf on this tape."""
        if loss.tape is not self:
            raise ValueError("loss was produced on a different tape")
        if loss.values.shape != ():
            raise ValueError("backward expects a scalar loss")
        grads: dict[int, np.ndarray] = {}
        result = {t: np.zeros(t.values.shape, dtype=self.dtype) for t in self._trainable}
        if not loss.requires_grad:
            return result
        needed: set[int] = set()
        stack = [loss._id]
        while stack:
            nid = stack.pop()
            if nid in needed:
                continue
            needed.add(nid)
            node = self._nodes.get(nid)
            if node is not None:
                stack.extend(node[0])
        grads[loss._id] = np.ones((), dtype=self.dtype)
        for nid in sorted(needed, reverse=True):
            g = grads.get(nid)
            if g is None:
                continue
            node = self._nodes.get(nid)
            if node is None:
                continue
            inputs, fn = node
            del grads[nid]
            for iid, contrib in zip(inputs, fn(g)):
                if contrib is None:
                    continue
                acc = grads.get(iid)
                grads[iid] = contrib if acc is None else acc + contrib
        for t in self._trainable:
            g = grads.get(t._id)
            if g is not None:
                result[t] = np.asarray(g, dtype=self.dtype)
        return result


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Tensor):
            return a.tape
    raise TypeError("expected at least one Tensor argument")


def _val(x, tape: Tape) -> np.ndarray:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("tensors belong to different tapes")
        return x.values
    return np.asarray(x, dtype=tape.dtype)


def _needs(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


def _tensor_inputs(*args) -> list[Tensor]:
    return [a for a in args if isinstance(a, Tensor)]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op: str, a, b, forward, da, db) -> Tensor:
    tape = _tape_of(a, b)
    av, bv = _val(a, tape), _val(b, tape)
    out = forward(av, bv)
    na, nb = _needs(a), _needs(b)

    def backward(g):
        contribs = []
        for x, v, d, n in ((a, av, da, na), (b, bv, db, nb)):
            if n:
                contribs.append(_unbroadcast(d(g, av, bv), x.values.shape))
            elif isinstance(x, Tensor):
                contribs.append(None)
        return tuple(contribs)

    return tape._record(out, op, _tensor_inputs(a, b), backward)


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def scale(t: Tensor, s: float) -> Tensor:
    return mul(t, float(s))


def _unary(op: str, t: Tensor, out: np.ndarray, dfn) -> Tensor:
    def backward(g):
        return (dfn(g),)

    return t.tape._record(out, op, [t], backward if t.requires_grad else None)


def relu(t: Tensor) -> Tensor:
    v = t.values
    mask = v > 0
    return _unary("relu", t, np.where(mask, v, 0.0), lambda g: g * mask)


def sigmoid(t: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-t.values))
    return _unary("sigmoid", t, s, lambda g: g * s * (1.0 - s))


def exp(t: Tensor) -> Tensor:
    out = np.exp(t.values)
    if not np.isfinite(out).all():
        raise FloatingPointError("exp overflow")
    return _unary("exp", t, out, lambda g: g * out)


def log(t: Tensor) -> Tensor:
    v = t.values
    if np.any(v <= 0.0):
        raise FloatingPointError("log of non-positive value")
    return _unary("log", t, np.log(v), lambda g: g / v)


def sqrt(t: Tensor) -> Tensor:
    v = t.values
    if np.any(v < 0.0):
        raise FloatingPointError("sqrt of negative value")
    out = np.sqrt(v)
    return _unary("sqrt", t, out, lambda g: g * 0.5 / out)


def absolute(t: Tensor) -> Tensor:
    v = t.values
    return _unary("abs", t, np.abs(v), lambda g: g * np.sign(v))


def clip01(t: Tensor) -> Tensor:
    v = t.values
    mask = (v >= 0.0) & (v <= 1.0)
    return _unary("clip01", t, np.clip(v, 0.0, 1.0), lambda g: g * mask)


def power(base: Tensor, exponent) -> Tensor:
    """base ** exponent with exponent a float or a scalar tensor.

    Negative bases under fractional exponents are a domain error. The
    adjoint for the exponent uses log(max(base, 1e-12)) and is defined as
    0 wherever base == 0.
    """
    tape = base.tape
    bv = base.values
    ev = _val(exponent, tape)
    if ev.shape != ():
        raise ValueError("power expects a scalar exponent")
    e = float(ev)
    if np.any(bv < 0.0) and e != round(e):
        raise FloatingPointError("fractional power of negative base")
    out = np.power(bv, ev)
    if not np.isfinite(out).all():
        raise FloatingPointError("power overflow")
    safe = np.maximum(bv, _BASE_FLOOR)
    nb, ne = _needs(base), _needs(exponent)

    def backward(g):
        contribs = []
        if nb:
            contribs.append(g * ev * np.power(safe, e - 1.0))
        elif isinstance(base, Tensor):
            contribs.append(None)
        if ne:
            dlog = np.where(bv == 0.0, 0.0, np.log(safe))
            contribs.append(np.sum(g * out * dlog).astype(tape.dtype))
        elif isinstance(exponent, Tensor):
            contribs.append(None)
        return tuple(contribs)

    return tape._record(out, "pow", _tensor_inputs(base, exponent), backward)


def reshape(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = t.values.shape
    return _unary("reshape", t, t.values.reshape(shape),
                  lambda g: g.reshape(old))


def sum_over(t: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    v = t.values
    out = v.sum(axis=axes, keepdims=keepdims)

    def dfn(g):
        if axes is None:
            return np.broadcast_to(g, v.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axes)
        return np.broadcast_to(gg, v.shape).copy()

    return _unary("sum", t, out, dfn)


def mean_over(t: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    v = t.values
    out = v.mean(axis=axes, keepdims=keepdims)
    count = v.size if axes is None else np.prod(
        [v.shape[a] for a in (axes if isinstance(axes, tuple) else (axes,))])

    def dfn(g):
        if axes is None:
            return np.broadcast_to(g / count, v.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axes)
        return np.broadcast_to(gg / count, v.shape).copy()

    return _unary("mean", t, out, dfn)


def reduce_sum(t: Tensor) -> Tensor:
    return sum_over(t)


def reduce_mean(t: Tensor) -> Tensor:
    return mean_over(t)


def sq_l2(t: Tensor) -> Tensor:
    """Sum of squares of all entries, as a scalar tensor."""
    v = t.values
    return _unary("sq_l2", t, np.sum(v * v), lambda g: g * 2.0 * v)


def take0(t: Tensor, i: int) -> Tensor:
    """Select index i along axis 0."""
    out = t.values[i]

    def dfn(g):
        acc = np.zeros(t.values.shape, dtype=t.tape.dtype)
        acc[i] = g
        return acc

    return _unary("take0", t, out, dfn)


def gather(t: Tensor, index_map: np.ndarray) -> Tensor:
    """out[pos] = t[index_map[pos]] for a 1-d tensor and an integer map."""
    idx = np.asarray(index_map)
    out = t.values[idx]

    def dfn(g):
        acc = np.zeros(t.values.shape, dtype=t.tape.dtype)
        np.add.at(acc, idx, g)
        return acc

    return _unary("gather", t, out, dfn)


def gather_rows(t: Tensor, indices: np.ndarray) -> Tensor:
    """out[i] = t[i, indices[i]] for a 2-d tensor."""
    idx = np.asarray(indices)
    rows = np.arange(t.values.shape[0])
    out = t.values[rows, idx]

    def dfn(g):
        acc = np.zeros(t.values.shape, dtype=t.tape.dtype)
        np.add.at(acc, (rows, idx), g)
        return acc

    return _unary("gather_rows", t, out, dfn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tape = _tape_of(*tensors)
    out = np.stack([t.values for t in tensors], axis=axis)
    needs = [t.requires_grad for t in tensors]

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] if needs[i] else None for i in range(len(tensors)))

    return tape._record(out, "stack", list(tensors),
                        backward if any(needs) else None)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tape = _tape_of(*tensors)
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    needs = [t.requires_grad for t in tensors]

    def backward(g):
        parts = []
        for i in range(len(tensors)):
            if needs[i]:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offsets[i], offsets[i + 1])
                parts.append(g[tuple(sl)])
            else:
                parts.append(None)
        return tuple(parts)

    return tape._record(out, "concat", list(tensors),
                        backward if any(needs) else None)


def conv2d(x: Tensor, kernel, padding: str = "reflect") -> Tensor:
    """Same-size correlation of the last two axes with one odd square kernel.

    The kernel applies to every leading slice (channels, batch) alike, which
    is the shape every pipeline convolution takes.
    """
    tape = x.tape
    kv = _val(kernel, tape)
    kh, kw = kv.shape
    pad = kh // 2
    h, w = x.values.shape[-2:]
    xp = ndops.pad2d(x.values, pad, padding)
    out = np.zeros(x.values.shape, dtype=tape.dtype)
    for i in range(kh):
        for j in range(kw):
            if kv[i, j] != 0.0:
                out += kv[i, j] * xp[..., i:i + h, j:j + w]
    nx, nk = _needs(x), _needs(kernel)

    def backward(g):
        contribs = []
        if nx:
            gxp = np.zeros(xp.shape, dtype=tape.dtype)
            for i in range(kh):
                for j in range(kw):
                    if kv[i, j] != 0.0:
                        gxp[..., i:i + h, j:j + w] += kv[i, j] * g
            contribs.append(ndops.pad2d_adjoint(gxp, x.values.shape, pad, padding))
        elif isinstance(x, Tensor):
            contribs.append(None)
        if nk:
            gk = np.empty((kh, kw), dtype=tape.dtype)
            for i in range(kh):
                for j in range(kw):
                    gk[i, j] = np.sum(g * xp[..., i:i + h, j:j + w])
            contribs.append(gk)
        elif isinstance(kernel, Tensor):
            contribs.append(None)
        return tuple(contribs)

    return tape._record(out, "conv2d", _tensor_inputs(x, kernel),
                        backward if (nx or nk) else None)


def conv_nchw(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Multi-channel same-size convolution with zero padding for the models.

    x is (N, C, H, W), weight is (O, C, k, k) with odd k, bias is (O,).
    """
    tape = x.tape
    wv = _val(weight, tape)
    o, c, kh, kw = wv.shape
    pad = kh // 2
    n, cin, h, w = x.values.shape
    if cin != c:
        raise ValueError(f"channel mismatch: input {cin}, weight {c}")
    xp = ndops.pad2d(x.values, pad, "zero")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwij,ocij->nohw", win, wv, optimize=True)
    if bias is not None:
        out = out + _val(bias, tape)[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=tape.dtype)
    nx, nw = _needs(x), _needs(weight)
    nb = bias is not None and _needs(bias)

    def backward(g):
        contribs = []
        if nx:
            gxp = np.zeros(xp.shape, dtype=tape.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + h, j:j + w] += np.einsum(
                        "nohw,oc->nchw", g, wv[:, :, i, j], optimize=True)
            contribs.append(gxp[:, :, pad:pad + h, pad:pad + w])
        else:
            contribs.append(None)
        if nw:
            contribs.append(np.einsum("nohw,nchwij->ocij", g, win, optimize=True))
        else:
            contribs.append(None)
        if bias is not None:
            contribs.append(g.sum(axis=(0, 2, 3)) if nb else None)
        return tuple(contribs)

    inputs = _tensor_inputs(x, weight) + (_tensor_inputs(bias) if bias is not None else [])
    return tape._record(out, "conv_nchw", inputs,
                        backward if (nx or nw or nb) else None)


def matmul(x: Tensor, w: Tensor) -> Tensor:
    tape = x.tape
    wv = _val(w, tape)
    xv = x.values
    out = xv @ wv
    nx, nw = _needs(x), _needs(w)

    def backward(g):
        return (g @ wv.T if nx else None,
                xv.T @ g if nw else None)

    return tape._record(out, "matmul", _tensor_inputs(x, w),
                        backward if (nx or nw) else None)


def channel_affine(v: Tensor, matrix) -> Tensor:
    """Per-pixel 3x3 channel mix over a (..., 3, H, W) tensor."""
    tape = v.tape
    mv = _val(matrix, tape)
    vv = v.values
    out = ndops.channel_affine(vv, mv)
    nv, nm = _needs(v), _needs(matrix)

    def backward(g):
        contribs = []
        if nv:
            contribs.append(ndops.channel_affine(g, mv.T))
        elif isinstance(v, Tensor):
            contribs.append(None)
        if nm:
            contribs.append(np.einsum("...chw,...jhw->cj", g, vv, optimize=True))
        elif isinstance(matrix, Tensor):
            contribs.append(None)
        return tuple(contribs)

    return tape._record(out, "channel_affine", _tensor_inputs(v, matrix),
                        backward if (nv or nm) else None)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first position."""
    n, c, h, w = x.values.shape
    if h % 2 or w % 2:
        raise ValueError("maxpool2 needs even spatial sides")
    r = x.values.reshape(n, c, h // 2, 2, w // 2, 2)
    r = r.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = r.argmax(axis=-1)
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]

    def dfn(g):
        acc = np.zeros((n, c, h // 2, w // 2, 4), dtype=x.tape.dtype)
        np.put_along_axis(acc, idx[..., None], g[..., None], axis=-1)
        acc = acc.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return acc.reshape(n, c, h, w)

    return _unary("maxpool2", x, out, dfn)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of the last two axes."""
    n, c, h, w = x.values.shape
    out = np.repeat(np.repeat(x.values, 2, axis=2), 2, axis=3)

    def dfn(g):
        return g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))

    return _unary("upsample2", x, out, dfn)


def log_softmax(t: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last axis."""
    v = t.values
    m = v.max(axis=-1, keepdims=True)
    z = v - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def dfn(g):
        return g - np.exp(out) * g.sum(axis=-1, keepdims=True)

    return _unary("log_softmax", t, out, dfn)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, the slow honest way."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros(x.shape, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += step
        xm = x.copy()
        xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2.0 * step)
    return g


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise relative difference with a small absolute floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
