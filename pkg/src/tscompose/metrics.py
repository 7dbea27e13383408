"""Forecast accuracy metrics: MSE, MAE, SMAPE, MAPE, MASE and OWA.

Conventions:
  * pred/target are [H, C] (a 1-D series is treated as one channel).
  * MASE scales by the mean seasonal difference of the *insample history*,
    computed per channel; channels are averaged afterwards.
  * OWA divides by the same metrics of a Naive2 baseline: seasonally adjusted
    naive when a 90% autocorrelation test at lag m fires on a strictly
    positive history (classical multiplicative adjustment), plain naive
    otherwise.
  * Undefined quantities (zero denominators) are reported as nan rather than
    raising, so callers can flag them.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

EPS = 1e-10

# Seasonal period by sampling frequency tag (M4-style convention).
PERIODICITY = {"Y": 1, "A": 1, "Q": 4, "M": 12, "W": 1, "D": 1, "B": 1, "h": 24, "H": 24}


def periodicity_for_freq(freq: str) -> int:
    try:
        return PERIODICITY[freq]
    except KeyError:
        raise KeyError(f"unknown frequency tag {freq!r}; known: {sorted(PERIODICITY)}")


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"expected [H, C] array, got shape {x.shape}")
    return x


@dataclass
class MetricReport:
    mse: float
    mae: float
    smape: float
    mape: float
    mase: float
    owa: float

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def mse(pred, target) -> float:
    pred, target = _as_2d(pred), _as_2d(target)
    return float(np.mean((target - pred) ** 2))


def mae(pred, target) -> float:
    pred, target = _as_2d(pred), _as_2d(target)
    return float(np.mean(np.abs(target - pred)))


def smape(pred, target) -> float:
    """Symmetric MAPE in [0, 200]; terms where |target|+|pred| == 0 count as 0."""
    pred, target = _as_2d(pred), _as_2d(target)
    denom = np.abs(target) + np.abs(pred)
    ratio = np.zeros_like(denom)
    nz = denom > 0
    ratio[nz] = np.abs(target[nz] - pred[nz]) / denom[nz]
    return float(200.0 * np.mean(ratio))


def mape(pred, target) -> float:
    """MAPE over entries with nonzero target; nan if every target is zero."""
    pred, target = _as_2d(pred), _as_2d(target)
    nz = np.abs(target) > 0
    if not np.any(nz):
        return float("nan")
    return float(100.0 * np.mean(np.abs((target[nz] - pred[nz]) / target[nz])))


def seasonal_diff_scale(history, m: int) -> np.ndarray:
    """Per-channel mean |x_j - x_{j-m}| over the insample history (MASE denominator)."""
    history = _as_2d(history)
    n = history.shape[0]
    if n <= m:
        raise ValueError(f"history length {n} must exceed periodicity m={m}")
    return np.mean(np.abs(history[m:] - history[:-m]), axis=0)


def mase(pred, target, history, m: int) -> float:
    """Mean absolute error scaled by the insample seasonal-difference mean.

    Computed per channel then averaged; nan if any channel's scale is zero.
    """
    pred, target = _as_2d(pred), _as_2d(target)
    scale = seasonal_diff_scale(history, m)
    if np.any(scale == 0.0):
        return float("nan")
    per_channel = np.mean(np.abs(target - pred), axis=0) / scale
    return float(np.mean(per_channel))


def _acf(x: np.ndarray, max_lag: int) -> np.ndarray:
    x = x - x.mean()
    denom = float(np.sum(x * x))
    if denom == 0.0:
        return np.zeros(max_lag + 1)
    out = np.empty(max_lag + 1)
    for lag in range(max_lag + 1):
        out[lag] = np.sum(x[lag:] * x[: len(x) - lag]) / denom
    return out


def is_seasonal(series: np.ndarray, m: int) -> bool:
    """90%-significance autocorrelation test at lag m (two-sided z, 1.645)."""
    series = np.asarray(series, dtype=np.float64)
    n = len(series)
    if m <= 1 or n < 3 * m:
        return False
    r = _acf(series, m)
    crit = 1.645 * np.sqrt((1.0 + 2.0 * np.sum(r[1:m] ** 2)) / n)
    return bool(abs(r[m]) > crit)


def _seasonal_indices(series: np.ndarray, m: int) -> np.ndarray:
    """Classical multiplicative decomposition indices, normalized to mean 1."""
    n = len(series)
    if m % 2 == 0:
        # 2 x m centered moving average
        kernel = np.full(m + 1, 1.0 / m)
        kernel[0] = kernel[-1] = 0.5 / m
    else:
        kernel = np.full(m, 1.0 / m)
    k = len(kernel)
    trend = np.convolve(series, kernel, mode="valid")  # length n - k + 1
    offset = k // 2
    ratios_by_phase: list[list[float]] = [[] for _ in range(m)]
    for i, tr in enumerate(trend):
        t = i + offset
        if tr > 0:
            ratios_by_phase[t % m].append(series[t] / tr)
    idx = np.ones(m)
    for j in range(m):
        if ratios_by_phase[j]:
            idx[j] = np.mean(ratios_by_phase[j])
    total = idx.sum()
    if total > 0:
        idx = idx * (m / total)
    return idx


def naive2_forecast(history, m: int, horizon: int) -> np.ndarray:
    """Per-channel naive forecast, seasonally adjusted when the lag-m test fires.

    The multiplicative adjustment is only defined for strictly positive
    channels; other channels fall back to the plain naive forecast.
    """
    history = _as_2d(history)
    n, C = history.shape
    out = np.empty((horizon, C))
    for c in range(C):
        x = history[:, c]
        if m > 1 and np.all(x > 0) and is_seasonal(x, m):
            idx = _seasonal_indices(x, m)
            z_last = x[-1] / idx[(n - 1) % m]
            for h in range(horizon):
                out[h, c] = z_last * idx[(n + h) % m]
        else:
            out[:, c] = x[-1]
    return out


def owa(pred, target, history, m: int) -> float:
    """0.5 * [SMAPE/SMAPE_Naive2 + MASE/MASE_Naive2]; nan when a baseline is 0/undefined."""
    pred, target, history = _as_2d(pred), _as_2d(target), _as_2d(history)
    base = naive2_forecast(history, m, pred.shape[0])
    smape_n2 = smape(base, target)
    mase_n2 = mase(base, target, history, m)
    mase_model = mase(pred, target, history, m)
    if not np.isfinite(mase_n2) or not np.isfinite(mase_model) or smape_n2 == 0.0 or mase_n2 == 0.0:
        return float("nan")
    return float(0.5 * (smape(pred, target) / smape_n2 + mase_model / mase_n2))


def metric_report(pred, target, history, m: int) -> MetricReport:
    """Evaluate the full suite on one forecast window."""
    pred, target = _as_2d(pred), _as_2d(target)
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} vs target {target.shape}")
    if pred.shape[0] < 1:
        raise ValueError("horizon must be >= 1")
    return MetricReport(
        mse=mse(pred, target),
        mae=mae(pred, target),
        smape=smape(pred, target),
        mape=mape(pred, target),
        mase=mase(pred, target, history, m),
        owa=owa(pred, target, history, m),
    )
