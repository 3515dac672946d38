"""Toy task models, losses, optimizers, and metrics.

The models are deliberately small (under 10k parameters) so a training run
over a drift-control grid finishes in minutes on a CPU. Parameters live in
plain dicts of arrays between steps; each train_step builds a fresh tape,
optionally rendering raw mosaics through the parametrized pipeline first so
pipeline parameters can train jointly with the model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .param_pipeline import ParamGroupMask, PipelineParams, params_to_tensors, process_param
from .rawio import CfaLayout

LOSS_KINDS = ("cross_entropy", "bce_dice", "sq_l2")
METRIC_KINDS = ("accuracy", "iou")


def glorot_init(shapes: list[tuple[str, tuple[int, ...], int, int]],
                seed: int) -> dict[str, np.ndarray]:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape, fan_in, fan_out in shapes:
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            a = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-a, a, shape)
    return params


@dataclass(frozen=True)
class TinyClassifier:
    """conv-relu-pool twice, global average pool, linear head."""

    n_classes: int = 2
    width: tuple[int, int] = (8, 16)

    def param_specs(self):
        c1, c2 = self.width
        k = self.n_classes
        return [
            ("conv1.w", (c1, 3, 3, 3), 3 * 9, c1 * 9),
            ("conv1.b", (c1,), 0, 0),
            ("conv2.w", (c2, c1, 3, 3), c1 * 9, c2 * 9),
            ("conv2.b", (c2,), 0, 0),
            ("head.w", (c2, k), c2, k),
            ("head.b", (k,), 0, 0),
        ]

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        return glorot_init(self.param_specs(), seed)

    def param_count(self) -> int:
        return sum(int(np.prod(s[1])) for s in self.param_specs())

    def forward(self, theta: dict[str, T.Tensor], x: T.Tensor) -> T.Tensor:
        h = T.maxpool2(T.relu(T.conv_nchw(x, theta["conv1.w"], theta["conv1.b"])))
        h = T.maxpool2(T.relu(T.conv_nchw(h, theta["conv2.w"], theta["conv2.b"])))
        h = T.mean_over(h, axes=(2, 3))
        return T.add(T.matmul(h, theta["head.w"]), theta["head.b"])


@dataclass(frozen=True)
class TinySegmenter:
    """Two-level encoder/decoder with skip connections and a 1x1 head."""

    width: tuple[int, int] = (8, 16)

    def param_specs(self):
        c1, c2 = self.width
        return [
            ("enc1.w", (c1, 3, 3, 3), 3 * 9, c1 * 9),
            ("enc1.b", (c1,), 0, 0),
            ("enc2.w", (c2, c1, 3, 3), c1 * 9, c2 * 9),
            ("enc2.b", (c2,), 0, 0),
            ("mid.w", (c2, c2, 3, 3), c2 * 9, c2 * 9),
            ("mid.b", (c2,), 0, 0),
            ("dec1.w", (c1, c2 + c2, 3, 3), (c2 + c2) * 9, c1 * 9),
            ("dec1.b", (c1,), 0, 0),
            ("head.w", (1, c1 + c1, 1, 1), c1 + c1, 1),
            ("head.b", (1,), 0, 0),
        ]

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        return glorot_init(self.param_specs(), seed)

    def param_count(self) -> int:
        return sum(int(np.prod(s[1])) for s in self.param_specs())

    def forward(self, theta: dict[str, T.Tensor], x: T.Tensor) -> T.Tensor:
        e1 = T.relu(T.conv_nchw(x, theta["enc1.w"], theta["enc1.b"]))
        e2 = T.relu(T.conv_nchw(T.maxpool2(e1), theta["enc2.w"], theta["enc2.b"]))
        mid = T.relu(T.conv_nchw(T.maxpool2(e2), theta["mid.w"], theta["mid.b"]))
        d2 = T.concat([T.upsample2(mid), e2], axis=1)
        d1 = T.relu(T.conv_nchw(d2, theta["dec1.w"], theta["dec1.b"]))
        d0 = T.concat([T.upsample2(d1), e1], axis=1)
        logits = T.conv_nchw(d0, theta["head.w"], theta["head.b"])
        return T.reshape(logits, logits.values.shape[:1] + logits.values.shape[2:])


def cross_entropy(logits: T.Tensor, labels: np.ndarray) -> T.Tensor:
    """Mean negative log-likelihood over the batch."""
    picked = T.gather_rows(T.log_softmax(logits), np.asarray(labels, dtype=np.int64))
    return T.scale(T.reduce_mean(picked), -1.0)


def bce_dice(logits: T.Tensor, masks: np.ndarray, smooth: float = 1.0) -> T.Tensor:
    """Stable BCE-with-logits plus (1 - Dice) over the whole batch."""
    y = np.asarray(masks, dtype=logits.tape.dtype)
    softplus = T.log(T.add(T.exp(T.scale(T.absolute(logits), -1.0)), 1.0))
    bce = T.reduce_mean(T.add(T.sub(T.relu(logits), T.mul(logits, y)), softplus))
    probs = T.sigmoid(logits)
    inter = T.reduce_sum(T.mul(probs, y))
    total = T.add(T.reduce_sum(probs), float(y.sum()))
    dice = T.div(T.add(T.scale(inter, 2.0), smooth), T.add(total, smooth))
    return T.add(bce, T.sub(1.0, dice))


def sq_l2_loss(pred: T.Tensor, target: np.ndarray) -> T.Tensor:
    """Mean over the batch of per-item squared l2 distance."""
    n = pred.values.shape[0]
    return T.scale(T.sq_l2(T.sub(pred, np.asarray(target))), 1.0 / n)


LOSSES = {"cross_entropy": cross_entropy, "bce_dice": bce_dice, "sq_l2": sq_l2_loss}


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            params[name] = params[name] - self.lr * g


class Adam:
    """Adam with bias correction; betas (0.9, 0.999), eps 1e-8."""

    def __init__(self, lr: float, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m = self.b1 * m + (1.0 - self.b1) * g
            v = self.b2 * v + (1.0 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1.0 - self.b1 ** self.t)
            vhat = v / (1.0 - self.b2 ** self.t)
            params[name] = params[name] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class StepResult:
    loss: float
    grads_seen: int


def train_step(model, params: dict[str, np.ndarray], optimizer,
               batch_x: np.ndarray, batch_y: np.ndarray, loss_kind: str,
               pipeline_params: PipelineParams | None = None,
               pipeline_mask: ParamGroupMask | None = None,
               pipeline_optimizer=None,
               cfa: CfaLayout | None = None,
               standardize: bool = True,
               dtype=np.float32) -> StepResult:
    """One optimization step; aborts on a non-finite loss.

    Without pipeline arguments, batch_x is a batch of rendered views
    (N, 3, H, W). With pipeline_params set, batch_x is raw mosaics
    (N, H, W); they are rendered on the same tape and any groups named in
    pipeline_mask receive updates from pipeline_optimizer.
    """
    if loss_kind not in LOSSES:
        raise ValueError(f"unknown loss {loss_kind!r}")
    tape = T.Tape(dtype=dtype)
    theta = {k: tape.leaf(v, trainable=True) for k, v in params.items()}
    if pipeline_params is not None:
        mask = pipeline_mask or ParamGroupMask.none()
        ptheta = params_to_tensors(tape, pipeline_params, mask)
        views = process_param(tape.leaf(batch_x), ptheta, cfa=cfa,
                              standardize=standardize)
    else:
        views = tape.leaf(batch_x)
    loss = LOSSES[loss_kind](model.forward(theta, views), batch_y)
    loss_value = float(loss.values)
    if not np.isfinite(loss_value):
        raise FloatingPointError("non-finite training loss")
    grads = tape.backward(loss)
    optimizer.step(params, {k: grads[theta[k]] for k in params})
    if pipeline_params is not None and pipeline_optimizer is not None:
        pdict = pipeline_params.as_dict()
        pgrads = {name: grads[ptheta[name]] for name in (pipeline_mask or ())}
        if pgrads:
            pipeline_optimizer.step(pdict, pgrads)
            for name, value in pdict.items():
                setattr(pipeline_params, name, value)
    return StepResult(loss=loss_value, grads_seen=len(grads))


def predict(model, params: dict[str, np.ndarray], views: np.ndarray,
            dtype=np.float32) -> np.ndarray:
    tape = T.Tape(dtype=dtype)
    theta = {k: tape.leaf(v) for k, v in params.items()}
    return model.forward(theta, tape.leaf(views)).values


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def iou(logits: np.ndarray, masks: np.ndarray, threshold: float = 0.5) -> float:
    """Mean per-image intersection over union at a probability threshold.

    An image with an empty union (nothing predicted, nothing true) scores 1.
    """
    cut = np.log(threshold / (1.0 - threshold))
    pred = logits > cut
    truth = np.asarray(masks, dtype=bool)
    scores = []
    for p, t in zip(pred, truth):
        union = np.logical_or(p, t).sum()
        if union == 0:
            scores.append(1.0)
        else:
            scores.append(np.logical_and(p, t).sum() / union)
    return float(np.mean(scores))


def evaluate(model, params: dict[str, np.ndarray], views: np.ndarray,
             targets: np.ndarray, metric: str, batch: int = 64,
             dtype=np.float32) -> float:
    """Metric on a dataset, evaluated in fixed-size batches."""
    if metric not in METRIC_KINDS:
        raise ValueError(f"unknown metric {metric!r}")
    outs = [predict(model, params, views[i:i + batch], dtype=dtype)
            for i in range(0, len(views), batch)]
    logits = np.concatenate(outs, axis=0)
    if metric == "accuracy":
        return accuracy(logits, targets)
    return iou(logits, targets)
