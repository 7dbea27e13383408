"""Small shared building blocks: linear layers, layer norm, positional tables."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, parameter

LN_EPS = 1e-5


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, name: str = "linear"):
        self.name = name
        self.w = parameter(uniform_init(rng, (in_features, out_features), in_features))
        self.b = parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.w
        return out + self.b if self.b is not None else out

    def params(self) -> list[tuple[str, Tensor]]:
        out = [(f"{self.name}.w", self.w)]
        if self.b is not None:
            out.append((f"{self.name}.b", self.b))
        return out


class LayerNorm:
    """Normalization over the last axis with learned gain/offset."""

    def __init__(self, width: int, name: str = "ln"):
        self.name = name
        self.gamma = parameter(np.ones(width))
        self.beta = parameter(np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / (var + LN_EPS).sqrt() * self.gamma + self.beta

    def params(self) -> list[tuple[str, Tensor]]:
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]


def sinusoidal_position_table(length: int, d_model: int) -> np.ndarray:
    """pe[t, 2i] = sin(t / 10000^(2i/d)), pe[t, 2i+1] = cos(same)."""
    table = np.zeros((length, d_model))
    position = np.arange(length)[:, None].astype(np.float64)
    div = np.exp(np.arange(0, d_model, 2) * (-np.log(10000.0) / d_model))
    table[:, 0::2] = np.sin(position * div)
    table[:, 1::2] = np.cos(position * div[: d_model // 2])
    return table
