"""Rank targets, the recommendation model, and its training procedure.

The recommender learns, from benchmark history, how a pipeline's relative
rank on a dataset depends on the dataset's descriptor vector and the
pipeline's design choices.  Each design choice owns a learned 16-wide
embedding; a config is the sum of its choices' embeddings.  Scoring a new
dataset needs only its descriptors — no model training — so recommendation
is zero-shot.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .layers import Linear
from .space import DesignSpace, PipelineConfig, default_space
from .tensor import Tensor, concat, no_grad, parameter, take_rows
from .training import Adam, _restore, _snapshot

D_EMBED = 16
HIDDEN = 128


def rank_normalize(matrix: np.ndarray) -> np.ndarray:
    """Per-row average ranks scaled by the row width: each row of raw scores
    (lower = better) becomes values in (0, 1], ties sharing their mean rank."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] == 0:
        raise ValueError(f"expected [n, m] score matrix, got {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("scores must be finite; pre-fill failures with the worst score")
    m = matrix.shape[1]
    return np.vstack([rankdata(row, method="average") / m for row in matrix])


def pearson_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """1 - Pearson correlation; invariant to positive-affine maps of either
    argument. Undefined (raises) when a side has zero variance."""
    target = np.asarray(target, dtype=np.float64)
    if pred.ndim != 1 or pred.shape != target.shape:
        raise ValueError(f"expected matching 1-D inputs, got {pred.shape} vs {target.shape}")
    if len(target) < 2 or target.std() == 0.0:
        raise ValueError("Pearson loss needs >= 2 samples with target variance")
    p = pred - pred.mean()
    t = Tensor(target - target.mean())
    cov = (p * t).mean()
    denom = ((p * p).mean() * (t * t).mean()).sqrt()
    return Tensor(1.0) - cov / denom


@dataclass
class MetaSample:
    """One benchmark outcome: a config's normalized rank on one dataset."""
    dataset_id: str
    features: np.ndarray  # descriptor vector of the dataset's train split
    config: PipelineConfig
    rank: float
    horizon: int


@dataclass
class MetaTrainConfig:
    # Benchmark histories are small (hundreds of rows), so favor many small
    # steps over few full-batch ones; patience counts epochs, not steps.
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 300
    patience: int = 30
    val_fraction: float = 0.1
    seed: int = 0
    resample: bool = False  # balance per-dataset sample counts by downsampling
    all_pl: bool = False    # pool horizons; horizon becomes an extra feature


class MetaPredictor:
    """(dataset descriptors, config embedding) -> predicted normalized rank."""

    def __init__(self, n_features: int, space: DesignSpace | None = None,
                 seed: int = 0, with_horizon: bool = False):
        self.space = space if space is not None else default_space()
        self.n_features = n_features
        self.with_horizon = with_horizon
        # one embedding row per (dimension, choice), dimensions in sorted order
        self._row_of: dict[tuple[str, str], int] = {}
        for dim in self.space.sorted_dims:
            for choice in dim.choices:
                self._row_of[(dim.name, choice)] = len(self._row_of)
        rng = np.random.default_rng(seed)
        self.embed = parameter(0.1 * rng.standard_normal((len(self._row_of), D_EMBED)))
        width = n_features + (1 if with_horizon else 0)
        self.fc1 = Linear(width + D_EMBED, HIDDEN, rng, name="meta.fc1")
        self.fc2 = Linear(HIDDEN, 1, rng, name="meta.fc2")
        self.feat_mean = np.zeros(width)
        self.feat_std = np.ones(width)
        self.trained = False

    def params(self) -> list[tuple[str, Tensor]]:
        return [("meta.embed", self.embed)] + self.fc1.params() + self.fc2.params()

    def encode_configs(self, configs: list[PipelineConfig]) -> np.ndarray:
        rows = [[self._row_of[(dim.name, cfg[dim.name])]
                 for dim in self.space.sorted_dims] for cfg in configs]
        return np.array(rows, dtype=np.int64)

    def forward(self, features: np.ndarray, config_idx: np.ndarray) -> Tensor:
        feats = (features - self.feat_mean) / self.feat_std
        emb = take_rows(self.embed, config_idx).sum(axis=1)  # [N, D_EMBED]
        h = concat([Tensor(feats), emb], axis=1)
        return self.fc2(self.fc1(h).gelu()).reshape(len(features))

    def predict(self, features: np.ndarray, configs: list[PipelineConfig],
                horizon: int | None = None) -> np.ndarray:
        if not self.trained:
            raise RuntimeError("predictor has not been trained")
        features = np.asarray(features, dtype=np.float64).reshape(-1)
        if self.with_horizon:
            if horizon is None:
                raise ValueError("this predictor was trained across horizons; pass one")
            features = np.append(features, float(horizon))
        if features.shape[0] != len(self.feat_mean):
            raise ValueError(f"expected {len(self.feat_mean)} features, got {features.shape[0]}")
        tiled = np.tile(features, (len(configs), 1))
        with no_grad():
            return self.forward(tiled, self.encode_configs(configs)).data.copy()

    # ----------------------------------------------------------- persistence

    def save(self, path: str) -> None:
        arrays = {f"param:{name}": p.data for name, p in self.params()}
        arrays["feat_mean"] = self.feat_mean
        arrays["feat_std"] = self.feat_std
        arrays["meta"] = np.array([self.n_features, int(self.with_horizon),
                                   int(self.trained)])
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path: str) -> "MetaPredictor":
        blob = np.load(path, allow_pickle=False)
        n_features, with_horizon, trained = (int(v) for v in blob["meta"])
        model = cls(n_features, with_horizon=bool(with_horizon))
        for name, p in model.params():
            p.data = blob[f"param:{name}"].copy()
        model.feat_mean = blob["feat_mean"].copy()
        model.feat_std = blob["feat_std"].copy()
        model.trained = bool(trained)
        return model


def _balance_by_dataset(samples: list[MetaSample], rng: np.random.Generator) -> list[MetaSample]:
    groups: dict[str, list[MetaSample]] = {}
    for s in samples:
        groups.setdefault(s.dataset_id, []).append(s)
    floor = min(len(g) for g in groups.values())
    kept = []
    for _, group in sorted(groups.items()):
        picked = rng.choice(len(group), size=floor, replace=False)
        kept.extend(group[i] for i in sorted(picked))
    return kept


def train_meta(samples: list[MetaSample], cfg: MetaTrainConfig | None = None,
               space: DesignSpace | None = None) -> MetaPredictor:
    cfg = cfg if cfg is not None else MetaTrainConfig()
    if len({s.dataset_id for s in samples}) < 2:
        raise ValueError("need samples from at least 2 datasets")
    rng = np.random.default_rng(cfg.seed)
    if cfg.resample:
        samples = _balance_by_dataset(samples, rng)

    feats = np.stack([s.features for s in samples])
    if cfg.all_pl:
        feats = np.hstack([feats, np.array([[float(s.horizon)] for s in samples])])
    targets = np.array([s.rank for s in samples])
    if targets.std() == 0.0:
        raise ValueError("targets have zero variance; nothing to rank")

    model = MetaPredictor(feats.shape[1] - (1 if cfg.all_pl else 0),
                          space=space, seed=cfg.seed, with_horizon=cfg.all_pl)
    config_idx = model.encode_configs([s.config for s in samples])

    order = rng.permutation(len(samples))
    n_val = max(1, int(len(samples) * cfg.val_fraction))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) < 2:
        raise ValueError(f"{len(samples)} samples is too few to split for validation")

    mean = feats[train_idx].mean(axis=0)
    std = feats[train_idx].std(axis=0)
    model.feat_mean = mean
    model.feat_std = np.where(std < 1e-8, 1.0, std)

    params = model.params()
    opt = Adam(params)
    best_val = np.inf
    best_state = _snapshot(params)
    stale = 0

    def val_loss() -> float:
        if targets[val_idx].std() == 0.0:
            return np.nan  # degenerate fold gives no early-stop signal
        with no_grad():
            pred = model.forward(feats[val_idx], config_idx[val_idx])
        return float(pearson_loss(pred, targets[val_idx]).data)

    for _ in range(cfg.max_epochs):
        epoch_order = rng.permutation(train_idx)
        for lo in range(0, len(epoch_order), cfg.batch_size):
            idx = epoch_order[lo:lo + cfg.batch_size]
            if len(idx) < 2 or targets[idx].std() == 0.0:
                continue  # correlation undefined on this batch
            opt.zero_grad()
            batch_loss = pearson_loss(model.forward(feats[idx], config_idx[idx]),
                                      targets[idx])
            batch_loss.backward()
            opt.step(cfg.lr)
        v = val_loss()
        if np.isnan(v):
            continue
        if v < best_val - 1e-12:
            best_val = v
            best_state = _snapshot(params)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if np.isfinite(best_val):  # otherwise keep the final weights as-is
        _restore(params, best_state)
    model.trained = True
    return model


def recommend(predictor: MetaPredictor, features: np.ndarray,
              candidates: list[PipelineConfig], k: int,
              horizon: int | None = None) -> list[PipelineConfig]:
    """The k candidates with the best (smallest) predicted rank; ties broken
    by config hash so the result is deterministic."""
    if not candidates:
        raise ValueError("no candidate configs")
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    scores = predictor.predict(features, candidates, horizon=horizon)
    order = sorted(range(len(candidates)),
                   key=lambda i: (scores[i], candidates[i].content_hash()))
    return [candidates[i] for i in order[:min(k, len(candidates))]]
