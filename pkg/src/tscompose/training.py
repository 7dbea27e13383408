"""Network optimization stage: losses, Adam, LR strategies, training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, clip_grad_norm, no_grad

LOSS_KINDS = ("MSE", "MAE", "HUBER")
LR_STRATEGIES = ("Null", "Type1")
HUBER_DELTA = 1.0


class TrialFailed(RuntimeError):
    """Raised when a training run diverges (NaN/Inf loss or gradients).

    The harness records the failure and moves on; it is not fatal."""


def loss(pred: Tensor, target, kind: str) -> Tensor:
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise ValueError(f"loss shape mismatch {pred.shape} vs {target.shape}")
    r = pred - target
    if kind == "MSE":
        return (r * r).mean()
    if kind == "MAE":
        return r.abs().mean()
    if kind == "HUBER":
        # 0.5 r^2 inside |r| <= delta, delta(|r| - delta/2) outside
        inside = Tensor((np.abs(r.data) <= HUBER_DELTA).astype(np.float64))
        quad = r * r * Tensor(0.5)
        lin = r.abs() * HUBER_DELTA - Tensor(0.5 * HUBER_DELTA * HUBER_DELTA)
        return (inside * quad + (Tensor(1.0) - inside) * lin).mean()
    raise ValueError(f"unknown loss kind {kind!r}")


def lr_schedule(base_lr: float, epoch: int, strategy: str) -> float:
    if epoch < 1:
        raise ValueError("epochs are 1-indexed")
    if strategy == "Null":
        return base_lr
    if strategy == "Type1":
        return base_lr * 0.5 ** (epoch - 1)
    raise ValueError(f"unknown lr strategy {strategy!r}")


class Adam:
    """Bias-corrected Adam; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params: list[tuple[str, Tensor]],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in params]
        self.v = [np.zeros_like(p.data) for _, p in params]

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, (name, p) in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrialFailed(f"non-finite gradient in {name}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 10
    loss: str = "MSE"
    learning_rate: float = 1e-3
    lr_strategy: str = "Null"
    batch_size: int = 32
    patience: int = 3
    seed: int = 0
    max_steps_per_epoch: int | None = None
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.lr_strategy not in LR_STRATEGIES:
            raise ValueError(f"unknown lr strategy {self.lr_strategy!r}")
        if self.epochs < 1 or self.learning_rate <= 0 or self.patience < 1:
            raise ValueError("epochs/learning_rate/patience must be positive")


@dataclass
class TrainResult:
    best_val: float
    val_history: list[float] = field(default_factory=list)
    train_history: list[float] = field(default_factory=list)
    epochs_run: int = 0


def _snapshot(params: list[tuple[str, Tensor]]) -> list[np.ndarray]:
    return [p.data.copy() for _, p in params]


def _restore(params: list[tuple[str, Tensor]], state: list[np.ndarray]) -> None:
    for (_, p), saved in zip(params, state):
        p.data = saved.copy()


def evaluate_loss(model, batches, kind: str) -> float:
    """Mean per-batch loss over a fixed batch list, outside the graph."""
    total, count = 0.0, 0
    with no_grad():
        for inputs, target in batches:
            total += float(loss(model(*inputs), target, kind).data)
            count += 1
    if count == 0:
        raise ValueError("no validation batches")
    return total / count


def train(model, make_train_batches, val_batches, cfg: TrainConfig) -> TrainResult:
    """Early-stopped training. `make_train_batches(rng)` yields
    (inputs_tuple, target) pairs; `val_batches` is a fixed list of the same.
    The best-validation weights are restored before returning."""
    params = model.params()
    opt = Adam(params)
    rng = np.random.default_rng(cfg.seed)

    best_val = math.inf
    best_state = _snapshot(params)
    bad_epochs = 0
    result = TrainResult(best_val=math.inf)

    for epoch in range(1, cfg.epochs + 1):
        lr = lr_schedule(cfg.learning_rate, epoch, cfg.lr_strategy)
        epoch_losses = []
        for step, (inputs, target) in enumerate(make_train_batches(rng)):
            if cfg.max_steps_per_epoch is not None and step >= cfg.max_steps_per_epoch:
                break
            opt.zero_grad()
            batch_loss = loss(model(*inputs), target, cfg.loss)
            value = float(batch_loss.data)
            if not math.isfinite(value):
                raise TrialFailed(f"non-finite training loss at epoch {epoch}")
            if batch_loss.requires_grad:
                batch_loss.backward()
                clip_grad_norm([p for _, p in params], cfg.clip_norm)
                opt.step(lr)
            epoch_losses.append(value)

        val = evaluate_loss(model, val_batches, cfg.loss)
        if not math.isfinite(val):
            raise TrialFailed(f"non-finite validation loss at epoch {epoch}")
        result.train_history.append(float(np.mean(epoch_losses)) if epoch_losses else math.nan)
        result.val_history.append(val)
        result.epochs_run = epoch

        if val < best_val:
            best_val = val
            best_state = _snapshot(params)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    _restore(params, best_state)
    result.best_val = best_val
    return result
