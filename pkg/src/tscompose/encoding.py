"""Turning [B, L, C] windows into token sequences and back into forecasts.

Three tokenizations are supported:
  * pointwise — one token per time step (channel vector projected, sinusoidal
    positions, optional calendar features concatenated before projection);
  * patch — overlapping time patches flattened and projected, learned
    positions (patch length 16, stride 8);
  * inverted — one token per variate (whole series projected); calendar
    features become one extra token.

Channel-independent processing folds channels into the batch axis; the head
unfolds them again.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Linear, sinusoidal_position_table
from .tensor import Tensor, concat, parameter, take_along_axis

PATCH_LEN = 16
PATCH_STRIDE = 8
N_CALENDAR_FEATURES = 4

TOKENIZATIONS = ("pointwise", "patch", "inverted")


@dataclass(frozen=True)
class TokenLayout:
    """Provenance the forecast head needs to undo tokenization."""
    mode: str
    channels: int       # data channels represented by the tokens
    folded: bool        # True when channels ride on the batch axis [B*C, n, d]
    n_tokens: int
    mark_token: bool = False  # inverted layout: one trailing calendar token


def apply_channel_independence(x: Tensor) -> Tensor:
    """[B, L, C] -> [B*C, L, 1]: each channel becomes its own series."""
    b, l, c = x.shape
    return x.swapaxes(1, 2).reshape(b * c, l, 1)


def fold_mark(mark: np.ndarray, channels: int) -> np.ndarray:
    """Repeat calendar features per channel to follow a channel-folded batch."""
    return np.repeat(mark, channels, axis=0)


def patch_count(length: int, patch_len: int = PATCH_LEN, stride: int = PATCH_STRIDE) -> int:
    if length < patch_len:
        raise ValueError(f"window length {length} < patch length {patch_len}")
    return (length - patch_len) // stride + 1


def calendar_features(timestamps: np.ndarray) -> np.ndarray:
    """[L] datetime64 -> [L, 4] (month, day, weekday, hour) scaled to [-0.5, 0.5].

    Sub-hourly resolution folds minutes into the hour fraction (clipped at the
    top so the bound holds).
    """
    ts = np.asarray(timestamps, dtype="datetime64[s]")
    years = ts.astype("datetime64[Y]")
    months_abs = ts.astype("datetime64[M]")
    days_abs = ts.astype("datetime64[D]")
    hours_abs = ts.astype("datetime64[h]")
    month = (months_abs - years).astype(int) + 1
    day = (days_abs - months_abs).astype(int) + 1
    weekday = (days_abs.astype(int) + 3) % 7  # epoch day 0 was a Thursday
    hour = (hours_abs - days_abs).astype(int)
    minute = (ts.astype("datetime64[m]") - hours_abs).astype(int)
    out = np.stack([
        (month - 1) / 11.0 - 0.5,
        (day - 1) / 30.0 - 0.5,
        weekday / 6.0 - 0.5,
        np.minimum((hour + minute / 60.0) / 23.0 - 0.5, 0.5),
    ], axis=1)
    return out


class PointwiseTokenizer:
    """Per-time-step linear projection with sinusoidal positions."""

    def __init__(self, channels_in: int, d_model: int, max_len: int,
                 with_mark: bool, rng: np.random.Generator):
        width = channels_in + (N_CALENDAR_FEATURES if with_mark else 0)
        self.with_mark = with_mark
        self.proj = Linear(width, d_model, rng, name="tok.pointwise")
        self._pe = sinusoidal_position_table(max_len, d_model)

    def __call__(self, x: Tensor, mark: np.ndarray | None = None) -> Tensor:
        if self.with_mark:
            if mark is None:
                raise ValueError("tokenizer built with calendar features but none supplied")
            x = concat([x, Tensor(mark)], axis=2)
        tokens = self.proj(x)
        return tokens + Tensor(self._pe[: x.shape[1]])

    def n_tokens(self, length: int) -> int:
        return length

    def params(self):
        return self.proj.params()


class PatchTokenizer:
    """Flattened overlapping patches with a learned position table."""

    def __init__(self, channels_in: int, d_model: int, max_len: int,
                 rng: np.random.Generator, patch_len: int = PATCH_LEN, stride: int = PATCH_STRIDE):
        self.patch_len = patch_len
        self.stride = stride
        self.channels_in = channels_in
        self.proj = Linear(patch_len * channels_in, d_model, rng, name="tok.patch")
        self.pos = parameter(0.02 * rng.standard_normal((patch_count(max_len, patch_len, stride), d_model)))

    def __call__(self, x: Tensor, mark: np.ndarray | None = None) -> Tensor:
        b, l, c = x.shape
        n = patch_count(l, self.patch_len, self.stride)
        starts = np.arange(n) * self.stride
        idx = (starts[:, None] + np.arange(self.patch_len)).reshape(-1)  # [n * patch_len]
        gathered = take_along_axis(x, np.broadcast_to(idx[None, :, None], (b, idx.size, c)), axis=1)
        patches = gathered.reshape(b, n, self.patch_len * c)
        return self.proj(patches) + self.pos.narrow(0, 0, n)

    def n_tokens(self, length: int) -> int:
        return patch_count(length, self.patch_len, self.stride)

    def params(self):
        return self.proj.params() + [("tok.patch.pos", self.pos)]


class InvertedTokenizer:
    """One token per variate: the whole look-back series is the feature vector."""

    def __init__(self, lookback: int, d_model: int, with_mark: bool, rng: np.random.Generator):
        self.lookback = lookback
        self.with_mark = with_mark
        self.proj = Linear(lookback, d_model, rng, name="tok.inverted")
        if with_mark:
            self.mark_proj = Linear(lookback * N_CALENDAR_FEATURES, d_model, rng, name="tok.inverted_mark")

    def __call__(self, x: Tensor, mark: np.ndarray | None = None) -> Tensor:
        b, l, c = x.shape
        if l != self.lookback:
            raise ValueError(f"inverted tokenizer built for length {self.lookback}, got {l}")
        tokens = self.proj(x.swapaxes(1, 2))  # [B, C, d]
        if self.with_mark:
            if mark is None:
                raise ValueError("tokenizer built with calendar features but none supplied")
            flat = Tensor(mark.reshape(b, l * N_CALENDAR_FEATURES))
            mark_tok = self.mark_proj(flat).reshape(b, 1, -1)
            tokens = concat([tokens, mark_tok], axis=1)
        return tokens

    def n_tokens(self, channels: int) -> int:
        return channels + (1 if self.with_mark else 0)

    def params(self):
        out = self.proj.params()
        if self.with_mark:
            out += self.mark_proj.params()
        return out


class ForecastHead:
    """Map final token representations to a [B, T, C] forecast."""

    def __init__(self, layout: TokenLayout, d_model: int, horizon: int, rng: np.random.Generator):
        self.layout = layout
        self.horizon = horizon
        if layout.mode == "inverted":
            self.proj = Linear(d_model, horizon, rng, name="head")
        elif layout.folded:
            self.proj = Linear(layout.n_tokens * d_model, horizon, rng, name="head")
        else:
            self.proj = Linear(layout.n_tokens * d_model, horizon * layout.channels, rng, name="head")

    def __call__(self, tokens: Tensor) -> Tensor:
        lay = self.layout
        if lay.mode == "inverted":
            variates = tokens.narrow(1, 0, lay.channels)  # drop any calendar token
            return self.proj(variates).swapaxes(1, 2)     # [B, T, C]
        flat = tokens.reshape(tokens.shape[0], lay.n_tokens * tokens.shape[2])
        out = self.proj(flat)
        if lay.folded:
            batch = tokens.shape[0] // lay.channels
            return out.reshape(batch, lay.channels, self.horizon).swapaxes(1, 2)
        return out.reshape(tokens.shape[0], self.horizon, lay.channels)

    def params(self):
        return self.proj.params()
