"""Series preprocessing: instance normalization, decomposition, multi-scale pooling.

All ops take [B, L, C] tensors, are differentiable end-to-end, and every
normalization method is exactly invertible on the window it was fitted to.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat, irfft, parameter, rfft

EPS = 1e-5

NORM_METHODS = ("None", "Stat", "RevIN", "DishTS")
DECOMP_METHODS = ("None", "MA", "MoEMA", "DFT")


@dataclass
class NormState:
    """Per-instance statistics captured at normalize time, used to invert."""
    method: str
    mu: Tensor | None = None       # [B, 1, C]
    sigma: Tensor | None = None    # [B, 1, C]
    level: Tensor | None = None    # [B, 1, C] (DishTS)
    scale: Tensor | None = None    # [B, 1, C] (DishTS)

    def stat_features(self) -> Tensor:
        """(mu, log sigma) flattened to [B, 2C] — conditioning input for
        de-stationarized attention (defined for Stat/RevIN only)."""
        if self.mu is None or self.sigma is None:
            raise ValueError(f"no location/scale statistics for method {self.method!r}")
        b, _, c = self.mu.shape
        return concat([self.mu.reshape(b, c), self.sigma.log().reshape(b, c)], axis=1)


def _window_stats(x: Tensor) -> tuple[Tensor, Tensor]:
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)  # population variance
    sigma = (var + EPS * EPS).sqrt()                   # floored so sigma >= EPS
    return mu, sigma


class Normalizer:
    """Instance normalization over the look-back window, per method.

    Stat:   (x - mu) / sigma with population statistics per instance/channel.
    RevIN:  Stat plus a learnable per-channel affine (gamma, beta).
    DishTS: learned per-channel linear projections of the window produce a
            level and a log-scale; x is shifted/scaled by those.
    None:   identity.
    """

    def __init__(self, method: str, channels: int, lookback: int):
        if method not in NORM_METHODS:
            raise ValueError(f"unknown normalization {method!r}")
        self.method = method
        self.channels = channels
        self.lookback = lookback
        self._params: list[tuple[str, Tensor]] = []
        if method == "RevIN":
            self.gamma = parameter(np.ones(channels))
            self.beta = parameter(np.zeros(channels))
            self._params = [("norm.gamma", self.gamma), ("norm.beta", self.beta)]
        elif method == "DishTS":
            # level starts at the window mean, scale starts at 1
            self.w_level = parameter(np.full((lookback, channels), 1.0 / lookback))
            self.w_scale = parameter(np.zeros((lookback, channels)))
            self._params = [("norm.w_level", self.w_level), ("norm.w_scale", self.w_scale)]

    def params(self) -> list[tuple[str, Tensor]]:
        return list(self._params)

    def normalize(self, x: Tensor) -> tuple[Tensor, NormState]:
        if x.ndim != 3:
            raise ValueError(f"expected [B, L, C], got {x.shape}")
        if self.method == "None":
            return x, NormState("None")
        if self.method in ("Stat", "RevIN"):
            mu, sigma = _window_stats(x)
            out = (x - mu) / sigma
            if self.method == "RevIN":
                out = out * self.gamma + self.beta
            return out, NormState(self.method, mu=mu, sigma=sigma)
        # DishTS
        level = (x * self.w_level).sum(axis=1, keepdims=True)
        scale = (x * self.w_scale).sum(axis=1, keepdims=True).exp()
        out = (x - level) / scale
        return out, NormState("DishTS", level=level, scale=scale)

    def denormalize(self, y: Tensor, state: NormState) -> Tensor:
        if state.method != self.method:
            raise ValueError(f"state built by {state.method!r}, normalizer is {self.method!r}")
        if self.method == "None":
            return y
        if self.method == "Stat":
            return y * state.sigma + state.mu
        if self.method == "RevIN":
            return (y - self.beta) / self.gamma * state.sigma + state.mu
        return y * state.scale + state.level


@dataclass
class DecompResult:
    seasonal: Tensor
    trend: Tensor | None  # None for method "None"


_MA_MATRIX_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _moving_average_matrix(length: int, kernel: int) -> np.ndarray:
    """Row t averages a centered window of `kernel` samples with replicate padding."""
    key = (length, kernel)
    if key not in _MA_MATRIX_CACHE:
        left = kernel // 2
        m = np.zeros((length, length))
        for t in range(length):
            for j in range(kernel):
                src = min(max(t - left + j, 0), length - 1)
                m[t, src] += 1.0 / kernel
        _MA_MATRIX_CACHE[key] = m
    return _MA_MATRIX_CACHE[key]


def _apply_time_matrix(x: Tensor, matrix: np.ndarray) -> Tensor:
    # out[b, t, c] = sum_s matrix[t, s] * x[b, s, c]
    return (x.swapaxes(1, 2) @ Tensor(matrix.T)).swapaxes(1, 2)


class Decomposer:
    """Split a window into seasonal + trend components (exact reconstruction)."""

    def __init__(self, method: str, kernel: int = 25, moe_kernels: tuple[int, ...] = (13, 17, 25),
                 dft_cutoff: int = 3):
        if method not in DECOMP_METHODS:
            raise ValueError(f"unknown decomposition {method!r}")
        self.method = method
        self.kernel = kernel
        self.moe_kernels = tuple(moe_kernels)
        self.dft_cutoff = dft_cutoff
        self._params: list[tuple[str, Tensor]] = []
        if method == "MoEMA":
            self.gate_logits = parameter(np.zeros(len(self.moe_kernels)))
            self._params = [("decomp.gate_logits", self.gate_logits)]

    def params(self) -> list[tuple[str, Tensor]]:
        return list(self._params)

    def decompose(self, x: Tensor) -> DecompResult:
        if x.ndim != 3:
            raise ValueError(f"expected [B, L, C], got {x.shape}")
        L = x.shape[1]
        if self.method == "None":
            return DecompResult(seasonal=x, trend=None)
        if self.method == "MA":
            trend = _apply_time_matrix(x, _moving_average_matrix(L, self.kernel))
        elif self.method == "MoEMA":
            gate = self.gate_logits.softmax(axis=-1)
            trend = None
            for i, k in enumerate(self.moe_kernels):
                part = _apply_time_matrix(x, _moving_average_matrix(L, k))
                weighted = part * gate.narrow(0, i, 1).reshape(1, 1, 1)
                trend = weighted if trend is None else trend + weighted
        else:  # DFT: trend = k lowest-frequency bins (DC included)
            re, im = rfft(x, axis=1)
            n_bins = re.shape[1]
            cutoff = min(self.dft_cutoff, n_bins)
            mask = np.zeros((1, n_bins, 1))
            mask[:, :cutoff, :] = 1.0
            trend = irfft(re * mask, im * mask, n=L, axis=1)
        return DecompResult(seasonal=x - trend, trend=trend)


def multiscale(x: Tensor, scales: tuple[int, ...] = (1, 2, 4)) -> list[Tensor]:
    """Average-pooled copies of the window, one per scale (stride == scale).

    Scale 1 is the input itself; lengths that do not divide are truncated at
    the tail deterministically.
    """
    if x.ndim != 3:
        raise ValueError(f"expected [B, L, C], got {x.shape}")
    L = x.shape[1]
    if L < max(scales):
        raise ValueError(f"window length {L} shorter than max scale {max(scales)}")
    out = []
    for s in scales:
        if s == 1:
            out.append(x)
            continue
        usable = (L // s) * s
        pooled = x.narrow(1, 0, usable)
        b, _, c = x.shape
        pooled = pooled.reshape(b, usable // s, s, c).mean(axis=2)
        out.append(pooled)
    return out
