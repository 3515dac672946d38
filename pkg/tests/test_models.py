"""Task-model layer: losses against closed forms, optimizers against
hand-stepped references, and joint model+pipeline training steps."""

import numpy as np
import pytest

import rawdrift.tensor as T
from rawdrift.models import (
    Adam,
    Sgd,
    TinyClassifier,
    TinySegmenter,
    accuracy,
    bce_dice,
    cross_entropy,
    evaluate,
    iou,
    predict,
    sq_l2_loss,
    train_step,
)
from rawdrift.param_pipeline import ParamGroupMask, default_params


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def finite_diff(build, x, step=1e-5):
    """Central differences of a scalar loss built from one leaf array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        for sign in (1.0, -1.0):
            probe = x.copy()
            probe[idx] += sign * step
            tape = T.Tape(dtype=np.float64)
            g[idx] += sign * float(build(tape, tape.leaf(probe, trainable=True)).values)
        g[idx] /= 2.0 * step
        it.iternext()
    return g


class TestLosses:
    def test_cross_entropy_matches_analytic_gradient(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(5, 3))
        labels = np.array([0, 2, 1, 1, 0])
        tape = T.Tape(dtype=np.float64)
        leaf = tape.leaf(logits, trainable=True)
        loss = cross_entropy(leaf, labels)
        expected_loss = -np.mean(
            np.log(softmax(logits))[np.arange(5), labels])
        assert abs(float(loss.values) - expected_loss) < 1e-12
        grad = tape.backward(loss)[leaf]
        onehot = np.eye(3)[labels]
        analytic = (softmax(logits) - onehot) / 5.0
        assert np.max(np.abs(grad - analytic)) < 1e-12

    def test_cross_entropy_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(4, 3))
        labels = np.array([2, 0, 1, 2])
        tape = T.Tape(dtype=np.float64)
        leaf = tape.leaf(logits, trainable=True)
        grad = tape.backward(cross_entropy(leaf, labels))[leaf]
        fd = finite_diff(lambda tp, lf: cross_entropy(lf, labels), logits)
        assert np.max(np.abs(grad - fd)) < 1e-8

    def test_bce_dice_matches_naive_formula(self):
        rng = np.random.default_rng(2)
        logits = rng.uniform(-4.0, 4.0, size=(3, 6, 6))
        masks = (rng.random((3, 6, 6)) > 0.5).astype(np.float64)
        tape = T.Tape(dtype=np.float64)
        loss = float(bce_dice(tape.leaf(logits), masks).values)
        p = 1.0 / (1.0 + np.exp(-logits))
        naive_bce = -np.mean(masks * np.log(p) + (1 - masks) * np.log(1 - p))
        dice = (2 * (p * masks).sum() + 1.0) / (p.sum() + masks.sum() + 1.0)
        assert abs(loss - (naive_bce + 1.0 - dice)) < 1e-10

    def test_bce_dice_gradient(self):
        rng = np.random.default_rng(3)
        logits = rng.uniform(-3.0, 3.0, size=(2, 4, 4))
        masks = (rng.random((2, 4, 4)) > 0.4).astype(np.float64)
        tape = T.Tape(dtype=np.float64)
        leaf = tape.leaf(logits, trainable=True)
        grad = tape.backward(bce_dice(leaf, masks))[leaf]
        fd = finite_diff(lambda tp, lf: bce_dice(lf, masks), logits)
        assert np.max(np.abs(grad - fd)) < 1e-7

    def test_bce_dice_stable_at_large_logits(self):
        logits = np.array([[[-80.0, 80.0], [40.0, -40.0]]])
        masks = np.array([[[0.0, 1.0], [1.0, 0.0]]])
        tape = T.Tape(dtype=np.float64)
        leaf = tape.leaf(logits, trainable=True)
        loss = bce_dice(leaf, masks)
        assert np.isfinite(float(loss.values))
        grad = tape.backward(loss)[leaf]
        assert np.all(np.isfinite(grad))

    def test_sq_l2_is_batch_mean_of_squared_norms(self):
        pred = np.array([[1.0, 2.0], [3.0, 4.0]])
        target = np.array([[0.0, 0.0], [3.0, 0.0]])
        tape = T.Tape(dtype=np.float64)
        loss = float(sq_l2_loss(tape.leaf(pred), target).values)
        assert abs(loss - (5.0 + 16.0) / 2.0) < 1e-12


class TestOptimizers:
    def test_sgd_step(self):
        params = {"w": np.array([1.0, 2.0])}
        Sgd(lr=0.5).step(params, {"w": np.array([2.0, -2.0])})
        assert np.array_equal(params["w"], np.array([0.0, 3.0]))

    def test_adam_matches_reference_steps(self):
        rng = np.random.default_rng(4)
        grads = [rng.normal(size=(3,)) for _ in range(7)]
        params = {"w": np.zeros(3)}
        opt = Adam(lr=0.05)
        for g in grads:
            opt.step(params, {"w": g})
        p, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
        for t, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9 ** t)
            vhat = v / (1 - 0.999 ** t)
            p = p - 0.05 * mhat / (np.sqrt(vhat) + 1e-8)
        assert np.max(np.abs(params["w"] - p)) < 1e-15

    def test_adam_minimizes_quadratic(self):
        params = {"p": np.array([10.0])}
        opt = Adam(lr=0.1)
        for _ in range(400):
            opt.step(params, {"p": 2.0 * (params["p"] - 3.0)})
        assert abs(params["p"][0] - 3.0) < 1e-2

    @pytest.mark.parametrize("make", [lambda: Sgd(lr=0.0), lambda: Adam(lr=0.0)])
    def test_zero_lr_leaves_params_bit_identical(self, make):
        params = {"w": np.array([0.125, -0.75, 3.5])}
        before = params["w"].copy()
        opt = make()
        for step in range(3):
            opt.step(params, {"w": np.array([1.0, -2.0, 0.5]) * (step + 1)})
        assert np.array_equal(params["w"], before)


class TestModels:
    def test_classifier_shapes_and_size(self):
        model = TinyClassifier(n_classes=3)
        params = model.init_params(seed=0)
        assert model.param_count() < 10_000
        assert sum(p.size for p in params.values()) == model.param_count()
        logits = predict(model, params, np.zeros((4, 3, 16, 16)))
        assert logits.shape == (4, 3)

    def test_segmenter_shapes_and_size(self):
        model = TinySegmenter()
        params = model.init_params(seed=0)
        assert model.param_count() < 10_000
        out = predict(model, params, np.zeros((2, 3, 16, 16)))
        assert out.shape == (2, 16, 16)

    def test_init_is_seeded_and_bounded(self):
        model = TinyClassifier()
        a = model.init_params(seed=7)
        b = model.init_params(seed=7)
        c = model.init_params(seed=8)
        for name in a:
            assert np.array_equal(a[name], b[name])
        assert any(not np.array_equal(a[n], c[n]) for n in a)
        bound = np.sqrt(6.0 / (3 * 9 + 8 * 9))
        w = a["conv1.w"]
        assert np.abs(w).max() <= bound
        assert np.array_equal(a["conv1.b"], np.zeros(8))

    def test_classifier_learns_separable_views(self):
        # class 0: bright left half; class 1: bright right half
        rng = np.random.default_rng(5)
        views = rng.uniform(0.0, 0.2, size=(32, 3, 16, 16))
        labels = np.arange(32) % 2
        views[labels == 0, :, :, :8] += 0.6
        views[labels == 1, :, :, 8:] += 0.6
        model = TinyClassifier(n_classes=2)
        params = model.init_params(seed=0)
        opt = Adam(lr=0.01)
        first = None
        for _ in range(60):
            res = train_step(model, params, opt, views, labels, "cross_entropy")
            first = res.loss if first is None else first
        assert res.loss < first
        assert evaluate(model, params, views, labels, "accuracy") == 1.0

    def test_segmenter_learns_threshold_mask(self):
        rng = np.random.default_rng(6)
        views = rng.uniform(0.0, 1.0, size=(8, 3, 16, 16))
        masks = (views.mean(axis=1) > 0.5).astype(np.float64)
        model = TinySegmenter()
        params = model.init_params(seed=1)
        opt = Adam(lr=0.02)
        for _ in range(80):
            train_step(model, params, opt, views, masks, "bce_dice")
        assert evaluate(model, params, views, masks, "iou") > 0.8


class TestTrainStep:
    def test_params_stay_plain_arrays(self):
        model = TinyClassifier()
        params = model.init_params(seed=0)
        train_step(model, params, Sgd(lr=0.1), np.zeros((2, 3, 8, 8)),
                   np.array([0, 1]), "cross_entropy")
        assert all(isinstance(v, np.ndarray) for v in params.values())

    def test_rejects_unknown_loss(self):
        model = TinyClassifier()
        with pytest.raises(ValueError, match="unknown loss"):
            train_step(model, model.init_params(seed=0), Sgd(lr=0.1),
                       np.zeros((1, 3, 8, 8)), np.array([0]), "hinge")

    def test_nonfinite_loss_aborts(self):
        model = TinyClassifier()
        params = model.init_params(seed=0)
        params["head.b"] = params["head.b"] + np.nan
        with pytest.raises(FloatingPointError, match="non-finite"):
            train_step(model, params, Sgd(lr=0.1), np.zeros((1, 3, 8, 8)),
                       np.array([0]), "cross_entropy")

    def _joint_setup(self, seed=0):
        rng = np.random.default_rng(seed)
        raws = rng.uniform(0.2, 0.8, size=(4, 16, 16))
        labels = np.array([0, 1, 0, 1])
        model = TinyClassifier(n_classes=2)
        return raws, labels, model

    def test_masked_pipeline_groups_update(self):
        raws, labels, model = self._joint_setup()
        params = model.init_params(seed=0)
        theta = default_params()
        baseline = theta.copy()
        train_step(model, params, Adam(lr=0.01), raws, labels, "cross_entropy",
                   pipeline_params=theta,
                   pipeline_mask=ParamGroupMask.of("wb_gains"),
                   pipeline_optimizer=Adam(lr=0.01))
        assert not np.array_equal(theta.wb_gains, baseline.wb_gains)
        for name in ("black_levels", "color_matrix", "gamma"):
            assert np.array_equal(getattr(theta, name), getattr(baseline, name))

    def test_frozen_equals_learned_with_zero_lr(self):
        raws, labels, model = self._joint_setup(seed=1)
        frozen_params = model.init_params(seed=3)
        learned_params = model.init_params(seed=3)
        frozen_theta = default_params()
        learned_theta = default_params()
        frozen_opt = Adam(lr=0.01)
        learned_opt = Adam(lr=0.01)
        for _ in range(3):
            train_step(model, frozen_params, frozen_opt, raws, labels,
                       "cross_entropy", pipeline_params=frozen_theta,
                       pipeline_mask=ParamGroupMask.none())
            train_step(model, learned_params, learned_opt, raws, labels,
                       "cross_entropy", pipeline_params=learned_theta,
                       pipeline_mask=ParamGroupMask.all(),
                       pipeline_optimizer=Adam(lr=0.0))
        for name in frozen_params:
            assert np.array_equal(frozen_params[name], learned_params[name])
        default = default_params()
        for name, value in learned_theta.as_dict().items():
            assert np.array_equal(value, getattr(default, name))


class TestMetrics:
    def test_accuracy(self):
        logits = np.array([[2.0, 1.0], [0.0, 3.0], [1.0, 0.5]])
        assert accuracy(logits, np.array([0, 1, 1])) == pytest.approx(2 / 3)

    def test_iou_counts_overlap(self):
        logits = np.full((1, 2, 2), -5.0)
        logits[0, 0, :] = 5.0
        masks = np.zeros((1, 2, 2))
        masks[0, :, 0] = 1.0
        assert iou(logits, masks) == pytest.approx(1 / 3)

    def test_iou_empty_union_scores_one(self):
        logits = np.full((2, 2, 2), -5.0)
        masks = np.zeros((2, 2, 2))
        masks[1, 0, 0] = 1.0
        assert iou(logits, masks) == pytest.approx((1.0 + 0.0) / 2.0)

    def test_evaluate_batches_match_single_pass(self):
        rng = np.random.default_rng(9)
        model = TinyClassifier()
        params = model.init_params(seed=0)
        views = rng.uniform(size=(10, 3, 8, 8))
        labels = rng.integers(0, 2, size=10)
        whole = evaluate(model, params, views, labels, "accuracy", batch=64)
        split = evaluate(model, params, views, labels, "accuracy", batch=3)
        assert whole == split

    def test_evaluate_rejects_unknown_metric(self):
        model = TinyClassifier()
        with pytest.raises(ValueError, match="unknown metric"):
            evaluate(model, model.init_params(seed=0), np.zeros((1, 3, 8, 8)),
                     np.array([0]), "f1")
