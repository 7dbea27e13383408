"""Dataset descriptors: per-channel scalar features aggregated across channels.

Four feature groups (temporal, statistical, spectral, fractal) are computed
per channel, then summarized over channels with seven order statistics.  The
vector ends with a distribution-shift score and the log-scaled dataset size.
Non-finite entries (degenerate inputs, e.g. a constant channel's skewness)
are zeroed and flagged in a companion mask so downstream models see fixed-
width finite input.

Conventions chosen here and relied on by tests:
  - spectra come from the real FFT at unit sampling rate; spectral moments
    (centroid, spread, skewness, kurtosis) weight frequency by normalized
    power; roll-off/roll-on/bandwidth use cumulative power fractions
  - the time centroid is normalized to [0, 1] over the window
  - zero crossings are counted (not divided by length)
  - the shift score of a multichannel dataset is the channel mean
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import gamma as gamma_fn

FEATURE_VERSION = "1"
AGGREGATIONS = ("mean", "std", "min", "q25", "median", "q75", "max")
MIN_LENGTH = 32

SHIFT_BINS = 16
SHIFT_SMOOTHING = 1e-6
NEIGHBOURHOOD = 10
HIGUCHI_KMAX = 10
HIST_BINS = 10


# ------------------------------------------------------------------ temporal

def _abs_energy(x):
    return float(np.sum(x * x))


def _auc(x):
    return float(np.trapezoid(x))


def _acf_first_decay(x):
    """Smallest positive lag whose autocorrelation drops below 1/e."""
    centered = x - x.mean()
    denom = float(np.dot(centered, centered))
    if denom == 0.0:
        return 0.0
    full = np.correlate(centered, centered, mode="full")[len(x) - 1:]
    acf = full / denom
    below = np.nonzero(acf[1:] < 1.0 / math.e)[0]
    return float(below[0] + 1) if below.size else float(len(x) - 1)


def _average_power(x):
    return float(np.mean(x * x))


def _centroid(x):
    energy = x * x
    total = energy.sum()
    if total == 0.0:
        return 0.0
    t = np.arange(len(x)) / max(len(x) - 1, 1)
    return float(np.sum(t * energy) / total)


def _signal_distance(x):
    return float(np.sum(np.sqrt(1.0 + np.diff(x) ** 2)))


def _negative_turnings(x):
    d = np.diff(x)
    return float(np.sum((d[:-1] < 0) & (d[1:] > 0)))


def _positive_turnings(x):
    d = np.diff(x)
    return float(np.sum((d[:-1] > 0) & (d[1:] < 0)))


def _neighbourhood_peaks(x, n=NEIGHBOURHOOD):
    if len(x) <= 2 * n:
        return 0.0
    count = 0
    for i in range(n, len(x) - n):
        v = x[i]
        if v > x[i - n:i].max() and v > x[i + 1:i + n + 1].max():
            count += 1
    return float(count)


def _peak_to_peak(x):
    return float(x.max() - x.min())


def _rms(x):
    return float(np.sqrt(np.mean(x * x)))


def _slope(x):
    t = np.arange(len(x), dtype=np.float64)
    return float(np.polyfit(t, x, 1)[0])


def _sum_abs_diff(x):
    return float(np.sum(np.abs(np.diff(x))))


def _zero_crossings(x):
    s = np.sign(x)
    s[s == 0] = 1
    return float(np.sum(s[1:] != s[:-1]))


# --------------------------------------------------------------- statistical

def _quantile(x, q):
    return float(np.quantile(x, q))


def _ecdf_slope(x):
    """Slope of the empirical CDF between its 0.5 and 0.75 quantiles."""
    lo, hi = np.quantile(x, [0.5, 0.75])
    return 0.25 / (hi - lo) if hi > lo else float("inf")


def _histogram_mode(x):
    counts, edges = np.histogram(x, bins=HIST_BINS)
    i = int(np.argmax(counts))
    return float(0.5 * (edges[i] + edges[i + 1]))


def _iqr(x):
    lo, hi = np.quantile(x, [0.25, 0.75])
    return float(hi - lo)


def _mad_mean(x):
    return float(np.mean(np.abs(x - x.mean())))


def _mad_median(x):
    return float(np.median(np.abs(x - np.median(x))))


# ------------------------------------------------------------------ spectral

def _signal_entropy(x):
    counts, _ = np.histogram(x, bins=HIST_BINS)
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def _spectrum(x):
    mag = np.abs(np.fft.rfft(x))
    freq = np.fft.rfftfreq(len(x), d=1.0)
    return freq, mag


def _power_fraction_freq(x, fraction):
    """Frequency at which cumulative power first reaches the given fraction."""
    freq, mag = _spectrum(x)
    power = mag * mag
    total = power.sum()
    if total == 0.0:
        return 0.0
    cum = np.cumsum(power) / total
    idx = min(int(np.searchsorted(cum, fraction)), len(freq) - 1)
    return float(freq[idx])


def _fundamental_frequency(x):
    freq, mag = _spectrum(x)
    return float(freq[1 + int(np.argmax(mag[1:]))])


def _max_frequency(x):
    return _power_fraction_freq(x, 0.95)


def _max_power(x):
    _, mag = _spectrum(x)
    return float(np.max(mag * mag) / len(x))


def _median_frequency(x):
    return _power_fraction_freq(x, 0.5)


def _spectral_moments(x):
    freq, mag = _spectrum(x)
    power = mag * mag
    total = power.sum()
    if total == 0.0:
        return freq, None, 0.0, 0.0
    p = power / total
    centroid = float(np.sum(freq * p))
    spread = float(np.sqrt(np.sum((freq - centroid) ** 2 * p)))
    return freq, p, centroid, spread


def _spectral_centroid(x):
    return _spectral_moments(x)[2]


def _spectral_decrease(x):
    _, mag = _spectrum(x)
    tail = mag[1:]
    total = tail.sum()
    if total == 0.0:
        return 0.0
    k = np.arange(1, len(mag))
    return float(np.sum((tail - mag[0]) / k) / total)


def _spectral_entropy(x):
    _, mag = _spectrum(x)
    power = mag * mag
    total = power.sum()
    if total == 0.0 or len(power) < 2:
        return 0.0
    p = power / total
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)) / np.log(len(power)))


def _spectral_kurtosis(x):
    freq, p, centroid, spread = _spectral_moments(x)
    if p is None or spread == 0.0:
        return float("nan")
    return float(np.sum((freq - centroid) ** 4 * p) / spread ** 4)


def _spectral_skewness(x):
    freq, p, centroid, spread = _spectral_moments(x)
    if p is None or spread == 0.0:
        return float("nan")
    return float(np.sum((freq - centroid) ** 3 * p) / spread ** 3)


def _spectral_slope(x):
    freq, mag = _spectrum(x)
    return float(np.polyfit(freq, mag, 1)[0])


def _spectral_spread(x):
    return _spectral_moments(x)[3]


def _spectral_variation(x):
    _, mag = _spectrum(x)
    mean = mag.mean()
    if mean == 0.0:
        return 0.0
    return float(mag.std() / mean)


def _spectral_rolloff(x):
    return _power_fraction_freq(x, 0.85)


def _spectral_rollon(x):
    return _power_fraction_freq(x, 0.05)


def _power_bandwidth(x):
    """Width of the frequency band holding the central 95% of power."""
    return _power_fraction_freq(x, 0.975) - _power_fraction_freq(x, 0.025)


def _fft_positive_turnings(x):
    _, mag = _spectrum(x)
    return _positive_turnings(mag)


# ------------------------------------------------------------------- fractal

def _log_sizes(lo, hi, n=12):
    sizes = np.unique(np.floor(np.logspace(np.log10(lo), np.log10(hi), n)).astype(int))
    return sizes[sizes >= lo]


def _dfa(x):
    """Detrended fluctuation exponent (linear detrending per segment)."""
    profile = np.cumsum(x - x.mean())
    L = len(profile)
    sizes = _log_sizes(4, max(L // 4, 5))
    logs, logf = [], []
    t_cache = {}
    for s in sizes:
        n_seg = L // s
        if n_seg < 2:
            continue
        segs = profile[:n_seg * s].reshape(n_seg, s)
        t = t_cache.setdefault(s, np.vstack([np.arange(s), np.ones(s)]).T)
        coef, *_ = np.linalg.lstsq(t, segs.T, rcond=None)
        resid = segs.T - t @ coef
        f = np.sqrt(np.mean(resid ** 2))
        if f > 0:
            logs.append(math.log(s))
            logf.append(math.log(f))
    if len(logs) < 2:
        return float("nan")
    return float(np.polyfit(logs, logf, 1)[0])


def _higuchi_lengths(x, kmax=HIGUCHI_KMAX):
    L = len(x)
    lengths = []
    for k in range(1, kmax + 1):
        lk = 0.0
        for m in range(k):
            idx = np.arange(m, L, k)
            if len(idx) < 2:
                continue
            dist = np.sum(np.abs(np.diff(x[idx])))
            norm = (L - 1) / ((len(idx) - 1) * k)
            lk += dist * norm / k
        lengths.append(lk / k)
    return np.array(lengths)


def _higuchi_fd(x):
    lk = _higuchi_lengths(x)
    if np.any(lk <= 0):
        return float("nan")
    k = np.arange(1, len(lk) + 1)
    return float(np.polyfit(np.log(1.0 / k), np.log(lk), 1)[0])


def _expected_rs(n):
    """Small-sample expectation of the rescaled range of white noise."""
    i = np.arange(1, n)
    tail = np.sum(np.sqrt((n - i) / i))
    if n <= 340:
        middle = gamma_fn((n - 1) / 2.0) / (math.sqrt(math.pi) * gamma_fn(n / 2.0))
    else:
        middle = 1.0 / math.sqrt(n * math.pi / 2.0)
    return (n - 0.5) / n * middle * tail


def _rescaled_range(x, n):
    n_seg = len(x) // n
    ratios = []
    for i in range(n_seg):
        seg = x[i * n:(i + 1) * n]
        z = seg - seg.mean()
        y = np.cumsum(z)
        r = y.max() - y.min()
        s = seg.std()
        if s > 0:
            ratios.append(r / s)
    return float(np.mean(ratios)) if ratios else float("nan")


def _hurst(x):
    """Rescaled-range exponent with the small-sample bias correction: the
    regression runs on log(R/S) minus its white-noise expectation, so white
    noise sits at 0.5 by construction."""
    L = len(x)
    sizes = _log_sizes(8, max(L // 2, 9))
    logs, devs = [], []
    for n in sizes:
        rs = _rescaled_range(x, int(n))
        if not math.isfinite(rs) or rs <= 0:
            continue
        logs.append(math.log(n))
        devs.append(math.log(rs) - math.log(_expected_rs(int(n))))
    if len(logs) < 2:
        return float("nan")
    return 0.5 + float(np.polyfit(logs, devs, 1)[0])


def _lempel_ziv(x):
    """Normalized LZ76 phrase count of the median-thresholded sequence."""
    s = (x > np.median(x)).astype(np.uint8)
    n = len(s)
    if n < 2:
        return 0.0
    c, l, i, k, kmax = 1, 1, 0, 1, 1
    while True:
        if s[i + k - 1] == s[l + k - 1]:
            k += 1
            if l + k > n:
                c += 1
                break
        else:
            kmax = max(kmax, k)
            i += 1
            if i == l:  # no earlier substring reproduces the tail: new phrase
                c += 1
                l += kmax
                if l + 1 > n:
                    break
                i, k, kmax = 0, 1, 1
            else:
                k = 1
    return float(c * math.log2(n) / n)


def _max_fractal_length(x):
    l1 = _higuchi_lengths(x, kmax=1)[0]
    return float(np.log10(l1)) if l1 > 0 else float("nan")


def _petrosian_fd(x):
    d = np.diff(x)
    s = np.sign(d)
    s[s == 0] = 1
    n_delta = float(np.sum(s[1:] != s[:-1]))
    L = len(x)
    return float(np.log10(L) / (np.log10(L) + np.log10(L / (L + 0.4 * n_delta))))


# ------------------------------------------------------------------ registry

def _build_catalogue():
    feats = [
        ("abs_energy", _abs_energy),
        ("auc", _auc),
        ("acf_first_decay", _acf_first_decay),
        ("average_power", _average_power),
        ("centroid", _centroid),
        ("signal_distance", _signal_distance),
        ("negative_turnings", _negative_turnings),
        ("positive_turnings", _positive_turnings),
        ("neighbourhood_peaks", _neighbourhood_peaks),
        ("peak_to_peak", _peak_to_peak),
        ("rms", _rms),
        ("slope", _slope),
        ("sum_abs_diff", _sum_abs_diff),
        ("zero_crossings", _zero_crossings),
        ("max", lambda x: float(x.max())),
        ("mean", lambda x: float(x.mean())),
        ("median", lambda x: float(np.median(x))),
        ("min", lambda x: float(x.min())),
        ("std", lambda x: float(x.std())),
        ("var", lambda x: float(x.var())),
    ]
    for q in range(10, 101, 10):
        feats.append((f"ecdf_q{q}", lambda x, q=q / 100.0: _quantile(x, q)))
    feats += [
        ("ecdf_slope", _ecdf_slope),
        ("histogram_mode", _histogram_mode),
        ("iqr", _iqr),
        ("kurtosis", lambda x: float(stats.kurtosis(x))),
        ("mad_mean", _mad_mean),
        ("mad_median", _mad_median),
        ("mean_abs_diff", lambda x: float(np.mean(np.abs(np.diff(x))))),
        ("median_abs_diff", lambda x: float(np.median(np.abs(np.diff(x))))),
        ("mean_diff", lambda x: float(np.mean(np.diff(x)))),
        ("median_diff", lambda x: float(np.median(np.diff(x)))),
        ("skewness", lambda x: float(stats.skew(x))),
        ("signal_entropy", _signal_entropy),
        ("fundamental_frequency", _fundamental_frequency),
        ("max_frequency", _max_frequency),
        ("max_power", _max_power),
        ("median_frequency", _median_frequency),
        ("spectral_centroid", _spectral_centroid),
        ("spectral_decrease", _spectral_decrease),
        ("spectral_entropy", _spectral_entropy),
        ("spectral_kurtosis", _spectral_kurtosis),
        ("spectral_skewness", _spectral_skewness),
        ("spectral_slope", _spectral_slope),
        ("spectral_spread", _spectral_spread),
        ("spectral_variation", _spectral_variation),
        ("spectral_rolloff", _spectral_rolloff),
        ("spectral_rollon", _spectral_rollon),
        ("power_bandwidth", _power_bandwidth),
        ("fft_positive_turnings", _fft_positive_turnings),
        ("dfa", _dfa),
        ("higuchi_fd", _higuchi_fd),
        ("hurst", _hurst),
        ("lempel_ziv", _lempel_ziv),
        ("max_fractal_length", _max_fractal_length),
        ("petrosian_fd", _petrosian_fd),
    ]
    return tuple(feats)


CATALOGUE = _build_catalogue()
BASE_FEATURE_NAMES = tuple(name for name, _ in CATALOGUE)


def channel_features(x: np.ndarray) -> np.ndarray:
    """All base features of one channel, in catalogue order (may contain
    non-finite entries for degenerate inputs; callers mask them)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected 1-D channel, got shape {x.shape}")
    # degenerate inputs (constant channels) legitimately produce non-finite
    # entries here; the mask policy downstream owns them, so stay quiet
    with warnings.catch_warnings(), np.errstate(all="ignore"):
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.array([fn(x) for _, fn in CATALOGUE])


# -------------------------------------------------------------- shift metric

def shift_window(length: int) -> int:
    return int(np.clip(length // 10, 32, 512))


def shifting_metric(x: np.ndarray, window: int | None = None) -> float:
    """Mean symmetric KL divergence between adjacent-window histograms,
    squashed to [0, 1); values near 1 mean severe distribution drift."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected 1-D series, got shape {x.shape}")
    w = window if window is not None else shift_window(len(x))
    if len(x) < 2 * w:
        raise ValueError(f"series of {len(x)} steps needs >= {2 * w} for window {w}")
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return 0.0
    n_win = len(x) // w
    hists = []
    for i in range(n_win):
        counts, _ = np.histogram(x[i * w:(i + 1) * w], bins=SHIFT_BINS, range=(lo, hi))
        p = counts / counts.sum() + SHIFT_SMOOTHING
        hists.append(p / p.sum())
    kls = []
    for p, q in zip(hists[:-1], hists[1:]):
        kls.append(0.5 * (np.sum(p * np.log(p / q)) + np.sum(q * np.log(q / p))))
    return float(1.0 - math.exp(-float(np.mean(kls))))


# ------------------------------------------------------------------- vector

@dataclass
class MetaFeatureVector:
    version: str
    names: tuple[str, ...]
    values: np.ndarray  # finite everywhere; masked entries are zero
    mask: np.ndarray    # 1.0 where the raw feature was non-finite

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.values, self.mask])

    @property
    def width(self) -> int:
        return 2 * len(self.values)


def feature_names() -> tuple[str, ...]:
    names = [f"{agg}_{feat}" for feat in BASE_FEATURE_NAMES for agg in AGGREGATIONS]
    names += ["shift_score", "log_channels", "log_length"]
    return tuple(names)


_AGG_FNS = {
    "mean": np.mean, "std": np.std, "min": np.min, "max": np.max,
    "q25": lambda v: np.quantile(v, 0.25), "median": np.median,
    "q75": lambda v: np.quantile(v, 0.75),
}


def extract_meta_features(series: np.ndarray) -> MetaFeatureVector:
    """Fixed-order descriptor vector of an [L, C] series (train split)."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2:
        raise ValueError(f"expected [L, C], got shape {series.shape}")
    L, C = series.shape
    if L < MIN_LENGTH:
        raise ValueError(f"need at least {MIN_LENGTH} steps, got {L}")

    per_channel = np.stack([channel_features(series[:, c]) for c in range(C)])
    raw = []
    with warnings.catch_warnings(), np.errstate(all="ignore"):
        warnings.simplefilter("ignore", RuntimeWarning)
        for j in range(per_channel.shape[1]):
            col = per_channel[:, j]
            for agg in AGGREGATIONS:
                raw.append(float(_AGG_FNS[agg](col)))
    raw.append(float(np.mean([shifting_metric(series[:, c]) for c in range(C)])))
    raw.append(math.log(C))
    raw.append(math.log(L))

    values = np.array(raw)
    mask = (~np.isfinite(values)).astype(np.float64)
    values = np.where(np.isfinite(values), values, 0.0)
    return MetaFeatureVector(version=FEATURE_VERSION, names=feature_names(),
                             values=values, mask=mask)
