import math

import numpy as np
import pytest

from tscompose.tensor import Tensor, parameter
from tscompose import training as T


# ------------------------------------------------------------------- losses

@pytest.mark.parametrize("kind", ["MSE", "MAE", "HUBER"])
def test_loss_zero_when_equal(kind):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 5))
    assert float(T.loss(Tensor(x), x, kind).data) == 0.0


def test_loss_frozen_values():
    assert float(T.loss(Tensor(np.array([0.0])), np.array([2.0]), "MSE").data) == 4.0
    assert float(T.loss(Tensor(np.array([0.0])), np.array([2.0]), "MAE").data) == 2.0
    # residual 2, delta 1: delta*(|r| - delta/2) = 1.5
    assert float(T.loss(Tensor(np.array([0.0])), np.array([2.0]), "HUBER").data) == 1.5
    # residual 0.5 inside delta: 0.5 * r^2 = 0.125
    assert float(T.loss(Tensor(np.array([0.5])), np.array([0.0]), "HUBER").data) == 0.125


def test_loss_positive_unless_equal_and_scales():
    rng = np.random.default_rng(1)
    p = rng.standard_normal((3, 4))
    t = rng.standard_normal((3, 4))
    for kind in T.LOSS_KINDS:
        assert float(T.loss(Tensor(p), t, kind).data) > 0.0
    for a in rng.uniform(0.2, 3.0, size=5):
        mse = float(T.loss(Tensor(p), t, "MSE").data)
        mae = float(T.loss(Tensor(p), t, "MAE").data)
        assert float(T.loss(Tensor(a * p), a * t, "MSE").data) == pytest.approx(a * a * mse)
        assert float(T.loss(Tensor(a * p), a * t, "MAE").data) == pytest.approx(abs(a) * mae)


def test_loss_errors():
    with pytest.raises(ValueError):
        T.loss(Tensor(np.zeros((2, 2))), np.zeros((2, 3)), "MSE")
    with pytest.raises(ValueError):
        T.loss(Tensor(np.zeros(2)), np.zeros(2), "L1")


def test_huber_gradient_piecewise():
    x = Tensor(np.array([0.5, 2.0, -3.0, -0.2]), requires_grad=True)
    out = T.loss(x, np.zeros(4), "HUBER") * Tensor(4.0)  # undo the mean
    out.backward()
    # inside: grad = r; outside: grad = delta * sign(r)
    assert np.allclose(x.grad, [0.5, 1.0, -1.0, -0.2], atol=1e-12)


# ------------------------------------------------------------------- schedule

def test_lr_schedule():
    assert T.lr_schedule(1e-3, 1, "Type1") == 1e-3
    assert T.lr_schedule(1e-3, 3, "Type1") == pytest.approx(2.5e-4)
    assert T.lr_schedule(1e-4, 7, "Null") == 1e-4
    with pytest.raises(ValueError):
        T.lr_schedule(1e-3, 0, "Type1")
    with pytest.raises(ValueError):
        T.lr_schedule(1e-3, 1, "Type2")


# ------------------------------------------------------------------- adam

def test_adam_zero_grad_keeps_params():
    p = parameter(np.array([1.0, -2.0]))
    opt = T.Adam([("p", p)])
    p.grad = np.zeros(2)
    opt.step(0.1)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_magnitude_is_lr():
    p = parameter(np.array([0.0]))
    opt = T.Adam([("p", p)])
    p.grad = np.ones(1)
    opt.step(1e-3)
    assert abs(p.data[0] + 1e-3) < 1e-9  # moved -lr (bias correction cancels)


def test_adam_step_opposes_gradient_on_smooth_descent():
    w = parameter(np.array([0.0]))
    opt = T.Adam([("w", w)])
    for _ in range(200):
        g = 2.0 * (w.data[0] - 3.0)
        before = w.data[0]
        w.grad = np.array([g])
        opt.step(1e-3)
        assert np.sign(w.data[0] - before) == -np.sign(g)


def test_adam_converges_on_quadratic():
    w = parameter(np.array([0.0]))
    opt = T.Adam([("w", w)])
    for _ in range(200):
        w.grad = np.array([2.0 * (w.data[0] - 3.0)])
        opt.step(0.1)
    assert abs(w.data[0] - 3.0) < 1e-2


def test_adam_rejects_nonfinite_gradient():
    p = parameter(np.array([1.0]))
    opt = T.Adam([("p", p)])
    p.grad = np.array([np.nan])
    with pytest.raises(T.TrialFailed):
        opt.step(0.1)


# ------------------------------------------------------------------- config

def test_train_config_validation():
    T.TrainConfig(epochs=10, loss="HUBER", lr_strategy="Type1")
    with pytest.raises(ValueError):
        T.TrainConfig(loss="RMSE")
    with pytest.raises(ValueError):
        T.TrainConfig(lr_strategy="Cosine")
    with pytest.raises(ValueError):
        T.TrainConfig(epochs=0)


# ------------------------------------------------------------------- loop

class _LinearModel:
    def __init__(self, d_in, d_out, seed):
        rng = np.random.default_rng(seed)
        self.w = parameter(0.1 * rng.standard_normal((d_in, d_out)))
        self.b = parameter(np.zeros(d_out))

    def __call__(self, x):
        return Tensor(x) @ self.w + self.b

    def params(self):
        return [("w", self.w), ("b", self.b)]


class _ConstantModel:
    def __call__(self, x):
        return Tensor(np.zeros((x.shape[0], 1)))

    def params(self):
        return []


def _linear_problem(seed=0, n=32):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 4))
    w_true = rng.standard_normal((4, 2))
    y = x @ w_true + 0.5
    return x, y


def _batcher(x, y, batch):
    def make(rng):
        order = rng.permutation(len(x))
        for i in range(0, len(x), batch):
            sel = order[i : i + batch]
            yield (x[sel],), y[sel]
    return make


def test_train_fits_exact_linear_data():
    x, y = _linear_problem()
    model = _LinearModel(4, 2, seed=1)
    cfg = T.TrainConfig(epochs=200, loss="MSE", learning_rate=0.02,
                        patience=200, seed=3, batch_size=8)
    result = T.train(model, _batcher(x, y, 8), [((x,), y)], cfg)
    # exact linear data: least-squares optimum is zero loss
    assert result.train_history[-1] < 1e-6
    assert result.best_val < 1e-6


def test_train_constant_model_stops_at_patience():
    x = np.zeros((8, 3))
    y = np.ones((8, 1))
    model = _ConstantModel()
    cfg = T.TrainConfig(epochs=50, loss="MSE", learning_rate=1e-3, patience=3, seed=0)
    result = T.train(model, _batcher(x, y, 4), [((x,), y)], cfg)
    # first epoch records the only improvement, then patience epochs of none
    assert result.epochs_run == 4
    assert all(v == result.val_history[0] for v in result.val_history)


def test_train_restores_exact_best_weights():
    x, y = _linear_problem(seed=5)
    model = _LinearModel(4, 2, seed=2)
    cfg = T.TrainConfig(epochs=8, loss="MAE", learning_rate=0.05, patience=2, seed=4)
    result = T.train(model, _batcher(x, y, 8), [((x,), y)], cfg)
    after = T.evaluate_loss(model, [((x,), y)], "MAE")
    assert after == result.best_val
    assert result.best_val == min(result.val_history)


def test_train_deterministic_given_seed():
    x, y = _linear_problem(seed=6)
    histories = []
    for _ in range(2):
        model = _LinearModel(4, 2, seed=7)
        cfg = T.TrainConfig(epochs=5, loss="MSE", learning_rate=0.01, patience=5, seed=9)
        result = T.train(model, _batcher(x, y, 8), [((x,), y)], cfg)
        histories.append((tuple(result.val_history), tuple(result.train_history)))
    assert histories[0] == histories[1]


def test_train_flags_divergence():
    x, y = _linear_problem(seed=8)
    model = _LinearModel(4, 2, seed=3)
    model.w.data[0, 0] = np.nan
    cfg = T.TrainConfig(epochs=3, loss="MSE", learning_rate=0.01, seed=0)
    with pytest.raises(T.TrialFailed):
        T.train(model, _batcher(x, y, 8), [((x,), y)], cfg)


def test_max_steps_per_epoch_caps_updates():
    x, y = _linear_problem(seed=9, n=64)
    model = _LinearModel(4, 2, seed=4)
    cfg = T.TrainConfig(epochs=1, loss="MSE", learning_rate=0.01, seed=1,
                        max_steps_per_epoch=2, batch_size=8)
    counted = []

    def make(rng):
        for i in range(8):
            counted.append(i)
            yield (x[i * 8 : (i + 1) * 8],), y[i * 8 : (i + 1) * 8]

    T.train(model, make, [((x,), y)], cfg)
    # generator is abandoned after the cap (2 consumed + 1 peeked at most)
    assert len(counted) <= 3
