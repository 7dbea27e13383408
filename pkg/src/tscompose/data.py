"""Dataset handling: file ingestion, synthetic families, splits, windowing.

A dataset is a strictly regular time-indexed [L, C] array.  Ingestion
z-scores every channel with statistics from the train split only; the raw
values are kept alongside because feature extraction wants the original
scale.  All synthetic families share a fixed hourly epoch so calendar
features are meaningful and regeneration is reproducible bit-for-bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .encoding import calendar_features

DEFAULT_RATIOS = (0.7, 0.1, 0.2)
SPLIT_NAMES = ("train", "val", "test")
FIXED_EPOCH = np.datetime64("2020-01-01T00:00:00")

# seconds between samples -> seasonal period used by scaled-error metrics
_SEASON_BY_STEP = {3600: 24, 86400: 7}


class DataError(ValueError):
    """Malformed input data (bad file, gap, non-monotone index, NaN)."""


@dataclass
class SplitView:
    """One chronological slice of a dataset, ready for windowing."""
    name: str
    values: np.ndarray      # [L, C] standardized by train statistics
    raw: np.ndarray         # [L, C] original scale
    mark: np.ndarray        # [L, 4] calendar features
    timestamps: np.ndarray  # [L] datetime64[s]

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class Dataset:
    id: str
    columns: tuple[str, ...]
    timestamps: np.ndarray   # [L] datetime64[s], strictly regular
    raw: np.ndarray          # [L, C]
    values: np.ndarray       # [L, C] standardized
    mark: np.ndarray         # [L, 4]
    boundaries: tuple[int, int]  # end of train, end of val
    train_mean: np.ndarray   # [C]
    train_std: np.ndarray    # [C]
    season: int              # seasonal period for scaled metrics

    @property
    def channels(self) -> int:
        return self.raw.shape[1]

    @property
    def length(self) -> int:
        return self.raw.shape[0]

    def split(self, name: str) -> SplitView:
        if name not in SPLIT_NAMES:
            raise ValueError(f"unknown split {name!r}")
        t_end, v_end = self.boundaries
        lo, hi = {"train": (0, t_end), "val": (t_end, v_end),
                  "test": (v_end, self.length)}[name]
        return SplitView(name, self.values[lo:hi], self.raw[lo:hi],
                         self.mark[lo:hi], self.timestamps[lo:hi])


def _split_points(length: int, ratios: tuple[float, float, float]) -> tuple[int, int]:
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    t_end = int(length * ratios[0])
    v_end = t_end + int(length * ratios[1])
    if t_end < 2 or v_end <= t_end or v_end >= length:
        raise DataError(f"length {length} too short for splits {ratios}")
    return t_end, v_end


def build_dataset(dataset_id: str, timestamps: np.ndarray, values: np.ndarray,
                  columns: tuple[str, ...] | None = None,
                  ratios: tuple[float, float, float] = DEFAULT_RATIOS) -> Dataset:
    """Assemble a dataset from validated arrays: split, standardize, mark."""
    ts = np.asarray(timestamps, dtype="datetime64[s]")
    raw = np.asarray(values, dtype=np.float64)
    if raw.ndim != 2 or len(ts) != len(raw):
        raise DataError(f"values must be [L, C] aligned with timestamps, got {raw.shape}")
    steps = np.diff(ts.astype(np.int64))
    if len(steps) and steps.min() <= 0:
        bad = int(np.argmax(steps <= 0)) + 1
        raise DataError(f"timestamps not strictly increasing at row {bad + 1}")
    if len(steps) and np.unique(steps).size > 1:
        bad = int(np.argmax(steps != steps[0])) + 1
        raise DataError(f"irregular sampling (gap or extra row) at row {bad + 1}")
    if not np.all(np.isfinite(raw)):
        bad = int(np.argmax(~np.isfinite(raw).all(axis=1)))
        raise DataError(f"non-finite value at row {bad + 1}")

    t_end, v_end = _split_points(len(raw), ratios)
    mean = raw[:t_end].mean(axis=0)
    std = raw[:t_end].std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)  # constant channels pass through
    season = _SEASON_BY_STEP.get(int(steps[0]) if len(steps) else 0, 1)
    if columns is None:
        columns = tuple(f"ch{i}" for i in range(raw.shape[1]))
    return Dataset(
        id=dataset_id, columns=tuple(columns), timestamps=ts, raw=raw,
        values=(raw - mean) / std, mark=calendar_features(ts),
        boundaries=(t_end, v_end), train_mean=mean, train_std=std,
        season=season,
    )


def load_csv(path: str, dataset_id: str | None = None,
             ratios: tuple[float, float, float] = DEFAULT_RATIOS) -> Dataset:
    """Read a header + ISO-8601-timestamp + numeric-columns file."""
    times: list[np.datetime64] = []
    rows: list[list[float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or len(header) < 2:
            raise DataError(f"{path}: need a header with a timestamp and >=1 value column")
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not field.strip() for field in row):
                continue
            if len(row) != width:
                raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                times.append(np.datetime64(row[0].strip()))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad timestamp {row[0]!r}") from None
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value in {row[1:]!r}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    name = dataset_id if dataset_id is not None else path.rsplit("/", 1)[-1].rsplit(".", 1)[0]
    try:
        return build_dataset(name, np.array(times), np.array(rows),
                             columns=tuple(header[1:]), ratios=ratios)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


# ------------------------------------------------------------------ synthetic

def _gen_sin_trend(rng: np.random.Generator, length: int) -> np.ndarray:
    t = np.arange(length, dtype=np.float64)
    cols = []
    for _ in range(3):
        period = float(rng.choice([24.0, 84.0, 168.0]))
        amp = rng.uniform(0.5, 2.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        slope = rng.uniform(-1.5, 1.5)
        cols.append(amp * np.sin(2.0 * np.pi * t / period + phase)
                    + slope * t / length
                    + 0.1 * rng.standard_normal(length))
    return np.stack(cols, axis=1)


def _gen_ar2_season(rng: np.random.Generator, length: int) -> np.ndarray:
    t = np.arange(length, dtype=np.float64)
    cols = []
    for _ in range(3):
        phi1 = rng.uniform(0.3, 0.7)
        phi2 = rng.uniform(-0.3, 0.25)  # inside the AR(2) stationarity triangle
        eps = 0.3 * rng.standard_normal(length)
        x = np.zeros(length)
        for i in range(2, length):
            x[i] = phi1 * x[i - 1] + phi2 * x[i - 2] + eps[i]
        amp = rng.uniform(0.3, 1.0)
        cols.append(x + amp * np.sin(2.0 * np.pi * t / 24.0))
    return np.stack(cols, axis=1)


def _gen_level_shift(rng: np.random.Generator, length: int) -> np.ndarray:
    t = np.arange(length, dtype=np.float64)
    cols = []
    for _ in range(3):
        base = (0.4 * np.sin(2.0 * np.pi * t / 24.0 + rng.uniform(0, 2 * np.pi))
                + 0.25 * rng.standard_normal(length))
        level = np.zeros(length)
        n_shifts = int(rng.integers(4, 7))
        points = np.sort(rng.choice(np.arange(length // 10, length), n_shifts, replace=False))
        for p in points:
            level[p:] += rng.uniform(1.0, 3.0) * rng.choice([-1.0, 1.0])
        cols.append(base + level)
    return np.stack(cols, axis=1)


def _gen_multichannel(rng: np.random.Generator, length: int) -> np.ndarray:
    t = np.arange(length, dtype=np.float64)
    # two smooth latent factors drive all seven channels
    factors = np.zeros((length, 2))
    eps = 0.2 * rng.standard_normal((length, 2))
    for i in range(1, length):
        factors[i] = 0.95 * factors[i - 1] + eps[i]
    factors[:, 0] += np.sin(2.0 * np.pi * t / 24.0)
    factors[:, 1] += np.sin(2.0 * np.pi * t / 168.0)
    loading = rng.uniform(-1.0, 1.0, (2, 7))
    return factors @ loading + 0.15 * rng.standard_normal((length, 7))


def _gen_random_walk(rng: np.random.Generator, length: int) -> np.ndarray:
    drift = rng.uniform(-0.01, 0.01, 3)
    steps = 0.15 * rng.standard_normal((length, 3)) + drift
    return np.cumsum(steps, axis=0)


def _gen_heteroskedastic(rng: np.random.Generator, length: int) -> np.ndarray:
    t = np.arange(length, dtype=np.float64)
    cols = []
    for _ in range(3):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        sigma = 0.1 + 0.9 * (0.5 + 0.5 * np.sin(2.0 * np.pi * t / 500.0 + phase))
        cols.append(np.sin(2.0 * np.pi * t / 168.0 + phase)
                    + sigma * rng.standard_normal(length))
    return np.stack(cols, axis=1)


_GENERATORS = {
    "sin-trend": _gen_sin_trend,
    "ar2-season": _gen_ar2_season,
    "level-shift": _gen_level_shift,
    "multichannel": _gen_multichannel,
    "random-walk": _gen_random_walk,
    "heteroskedastic": _gen_heteroskedastic,
}

SYNTHETIC_FAMILIES = tuple(_GENERATORS)


def synthetic_dataset(family: str, seed: int = 0, length: int = 2000,
                      ratios: tuple[float, float, float] = DEFAULT_RATIOS,
                      dataset_id: str | None = None) -> Dataset:
    if family not in _GENERATORS:
        raise DataError(f"unknown synthetic family {family!r}; "
                        f"choose from {', '.join(SYNTHETIC_FAMILIES)}")
    rng = np.random.default_rng(seed)
    values = _GENERATORS[family](rng, length)
    timestamps = FIXED_EPOCH + np.arange(length) * np.timedelta64(3600, "s")
    return build_dataset(dataset_id or family, timestamps, values, ratios=ratios)


# ------------------------------------------------------------------ windowing

@dataclass
class WindowSet:
    """Stride-1 sliding windows over one split (views, do not mutate)."""
    x: np.ndarray     # [N, L_in, C]
    mark: np.ndarray  # [N, L_in, 4]
    y: np.ndarray     # [N, T, C]

    def __len__(self) -> int:
        return len(self.x)


def make_windows(split: SplitView, lookback: int, horizon: int) -> WindowSet:
    n = len(split) - lookback - horizon + 1
    if n <= 0:
        raise DataError(f"split {split.name!r} has {len(split)} steps, "
                        f"too short for lookback {lookback} + horizon {horizon}")
    x = sliding_window_view(split.values, lookback, axis=0).transpose(0, 2, 1)[:n]
    mark = sliding_window_view(split.mark, lookback, axis=0).transpose(0, 2, 1)[:n]
    y = sliding_window_view(split.values, horizon, axis=0).transpose(0, 2, 1)[lookback:lookback + n]
    return WindowSet(x=x, mark=mark, y=y)


def iter_batches(windows: WindowSet, batch_size: int, with_mark: bool,
                 rng: np.random.Generator | None = None):
    """Yield (inputs, target) pairs sized for the training loop; shuffled
    when an rng is supplied, in chronological order otherwise."""
    order = np.arange(len(windows))
    if rng is not None:
        order = rng.permutation(order)
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        inputs = (windows.x[idx], windows.mark[idx]) if with_mark else (windows.x[idx],)
        yield inputs, windows.y[idx]
