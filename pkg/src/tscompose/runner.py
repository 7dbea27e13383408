"""Experiment pool: trains every (dataset, config, horizon) cell, appends the
outcomes to a text ledger, and summarizes results per design choice.

Reproducibility rules the design here:
  - every cell derives its own seed from (global seed, dataset, config hash,
    horizon), so cells are independent of execution order and of each other
  - rows are written in canonical cell order even when cells run on a worker
    pool, so two runs of the same pool produce byte-identical ledgers
  - wall-clock timings go to a sidecar file, keeping nondeterminism out of
    the main ledger
  - a rerun skips every key already present, so interrupting and resuming
    converges to the same bytes as one uninterrupted run
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from time import perf_counter

import numpy as np

from .data import Dataset, iter_batches, make_windows
from .features import extract_meta_features
from .meta import MetaSample, rank_normalize
from .metrics import mae as metric_mae
from .metrics import mse as metric_mse
from .model import ForecastModel
from .space import PipelineConfig, default_space, fnv1a_64
from .tensor import no_grad
from .training import TrainConfig, train

LEDGER_NAME = "ledger.tsv"
TIMINGS_NAME = "timings.tsv"
LEDGER_COLUMNS = ("dataset_id", "config_hash", "horizon", "seed",
                  "status", "mse", "mae", "config")


class LedgerError(RuntimeError):
    """A ledger append would break the primary-key uniqueness contract."""


@dataclass
class ExperimentRecord:
    dataset_id: str
    config_hash: str      # 16 hex digits
    horizon: int
    seed: int
    status: str           # "ok" | "failed"
    mse: float            # nan when failed
    mae: float            # nan when failed
    config_text: str      # canonical text with newlines folded to "|"

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.dataset_id, self.config_hash, self.horizon)

    def to_line(self) -> str:
        return "\t".join([self.dataset_id, self.config_hash, str(self.horizon),
                          str(self.seed), self.status, repr(self.mse),
                          repr(self.mae), self.config_text])

    @classmethod
    def from_line(cls, line: str) -> "ExperimentRecord":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != len(LEDGER_COLUMNS):
            raise LedgerError(f"malformed ledger row: {line!r}")
        return cls(dataset_id=parts[0], config_hash=parts[1],
                   horizon=int(parts[2]), seed=int(parts[3]), status=parts[4],
                   mse=float(parts[5]), mae=float(parts[6]), config_text=parts[7])


def cell_seed(global_seed: int, dataset_id: str, config: PipelineConfig,
              horizon: int) -> int:
    text = f"{global_seed}|{dataset_id}|{config.content_hash():016x}|{horizon}"
    return fnv1a_64(text.encode())


def read_ledger(path: str) -> list[ExperimentRecord]:
    if not os.path.exists(path):
        return []
    records = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header and header.split("\t") != list(LEDGER_COLUMNS):
            raise LedgerError(f"{path}: unexpected header {header!r}")
        for line in fh:
            if line.endswith("\n"):  # a torn final line is ignored, re-run fills it
                records.append(ExperimentRecord.from_line(line))
    seen = set()
    for r in records:
        if r.key in seen:
            raise LedgerError(f"duplicate ledger key {r.key}")
        seen.add(r.key)
    return records


def _drop_torn_tail(path: str) -> None:
    """Truncate a half-written final line (a kill mid-append) so resuming
    re-runs that cell and reproduces the uninterrupted bytes."""
    if not os.path.exists(path):
        return
    with open(path, "rb+") as fh:
        data = fh.read()
        cut = data.rfind(b"\n") + 1
        if cut != len(data):
            fh.seek(cut)
            fh.truncate()


@dataclass
class RunnerConfig:
    out_dir: str
    global_seed: int = 0
    jobs: int = 1
    batch_size: int = 32
    patience: int = 3
    epoch_cap: int | None = None          # desk scale: cap the config's epochs
    max_steps_per_epoch: int | None = None
    limit: int | None = None              # stop after this many new cells
    denormalized: bool = False            # metrics on the original value scale


def run_cell(dataset: Dataset, config: PipelineConfig, horizon: int,
             seed: int, rc: RunnerConfig) -> tuple[float, float]:
    """Train one pipeline on one dataset and return test (MSE, MAE)."""
    lookback = config.seq_len()
    train_w = make_windows(dataset.split("train"), lookback, horizon)
    val_w = make_windows(dataset.split("val"), lookback, horizon)
    test_w = make_windows(dataset.split("test"), lookback, horizon)

    model = ForecastModel.build(config, dataset.channels, horizon, seed=seed)
    epochs = config.epochs() if rc.epoch_cap is None else min(config.epochs(), rc.epoch_cap)
    tc = TrainConfig(epochs=epochs, loss=config["Loss Function"],
                     learning_rate=config.learning_rate(),
                     lr_strategy=config["Learning Rate Strategy"],
                     batch_size=rc.batch_size, patience=rc.patience, seed=seed,
                     max_steps_per_epoch=rc.max_steps_per_epoch)
    val_batches = list(iter_batches(val_w, rc.batch_size, with_mark=True))
    train(model,
          lambda rng: iter_batches(train_w, rc.batch_size, True, rng),
          val_batches, tc)

    preds = []
    with no_grad():
        for inputs, _ in iter_batches(test_w, rc.batch_size, with_mark=True):
            preds.append(model(*inputs).data)
    pred = np.concatenate(preds)
    target = test_w.y
    if rc.denormalized:
        pred = pred * dataset.train_std + dataset.train_mean
        target = target * dataset.train_std + dataset.train_mean
    # mse/mae are elementwise means, so stacking the windows preserves them
    flat_pred = pred.reshape(-1, pred.shape[-1])
    flat_target = target.reshape(-1, target.shape[-1])
    return metric_mse(flat_pred, flat_target), metric_mae(flat_pred, flat_target)


def _canonical_cells(datasets: list[Dataset], configs: list[PipelineConfig],
                     horizons: list[int]):
    for ds in sorted(datasets, key=lambda d: d.id):
        for cfg in configs:
            for horizon in horizons:
                yield ds, cfg, horizon


def run_pool(datasets: list[Dataset], configs: list[PipelineConfig],
             horizons: list[int], rc: RunnerConfig) -> list[ExperimentRecord]:
    """Run every missing cell, appending outcomes in canonical order.

    Returns the complete ledger (old rows + new). Failures never abort the
    pool; they are recorded with status=failed and NaN metrics."""
    os.makedirs(rc.out_dir, exist_ok=True)
    ledger_path = os.path.join(rc.out_dir, LEDGER_NAME)
    _drop_torn_tail(ledger_path)
    existing = read_ledger(ledger_path)
    done = {r.key for r in existing}

    pending = []
    for ds, cfg, horizon in _canonical_cells(datasets, configs, horizons):
        key = (ds.id, f"{cfg.content_hash():016x}", horizon)
        if key not in done:
            pending.append((ds, cfg, horizon))
    if rc.limit is not None:
        pending = pending[:rc.limit]

    def compute(cell):
        ds, cfg, horizon = cell
        seed = cell_seed(rc.global_seed, ds.id, cfg, horizon)
        start = perf_counter()
        try:
            cell_mse, cell_mae = run_cell(ds, cfg, horizon, seed, rc)
            status = "ok"
        except Exception:
            cell_mse, cell_mae, status = float("nan"), float("nan"), "failed"
        record = ExperimentRecord(
            dataset_id=ds.id, config_hash=f"{cfg.content_hash():016x}",
            horizon=horizon, seed=seed, status=status, mse=cell_mse,
            mae=cell_mae, config_text=cfg.ledger_key())
        return record, perf_counter() - start

    fresh = not os.path.exists(ledger_path) or os.path.getsize(ledger_path) == 0
    new_records = []
    pool = ThreadPoolExecutor(rc.jobs) if rc.jobs > 1 else None
    try:
        results = pool.map(compute, pending) if pool else map(compute, pending)
        with open(ledger_path, "a", encoding="utf-8") as ledger, \
                open(os.path.join(rc.out_dir, TIMINGS_NAME), "a", encoding="utf-8") as timings:
            if fresh:
                ledger.write("\t".join(LEDGER_COLUMNS) + "\n")
                ledger.flush()
            for record, elapsed in results:  # map() preserves canonical order
                ledger.write(record.to_line() + "\n")
                ledger.flush()
                timings.write("\t".join([record.dataset_id, record.config_hash,
                                         str(record.horizon), f"{elapsed:.3f}"]) + "\n")
                timings.flush()
                new_records.append(record)
    finally:
        if pool:
            pool.shutdown(wait=False)
    return existing + new_records


# -------------------------------------------------------------------- matrix

def build_performance_matrix(records: list[ExperimentRecord],
                             dataset_ids: list[str],
                             configs: list[PipelineConfig],
                             horizon: int) -> np.ndarray:
    """[n datasets x m configs] MSE matrix; failed or missing cells take the
    worst score in their row so ranking puts them last."""
    by_key = {r.key: r for r in records}
    hashes = [f"{c.content_hash():016x}" for c in configs]
    matrix = np.full((len(dataset_ids), len(configs)), np.nan)
    for i, ds in enumerate(dataset_ids):
        for j, h in enumerate(hashes):
            r = by_key.get((ds, h, horizon))
            if r is not None and r.status == "ok" and np.isfinite(r.mse):
                matrix[i, j] = r.mse
    for i in range(len(dataset_ids)):
        row = matrix[i]
        finite = row[np.isfinite(row)]
        row[~np.isfinite(row)] = finite.max() * 2.0 if finite.size else 1.0
    return matrix


def assemble_meta_samples(datasets: list[Dataset],
                          configs: list[PipelineConfig],
                          records: list[ExperimentRecord],
                          horizon: int) -> list[MetaSample]:
    """Pair each dataset's descriptor vector with every config's rank."""
    ids = [d.id for d in datasets]
    ranks = rank_normalize(build_performance_matrix(records, ids, configs, horizon))
    samples = []
    for i, ds in enumerate(datasets):
        vec = extract_meta_features(ds.split("train").raw).as_array()
        for j, cfg in enumerate(configs):
            samples.append(MetaSample(ds.id, vec, cfg, float(ranks[i, j]), horizon))
    return samples


# -------------------------------------------------------------------- report

REPORT_COLUMNS = ("dataset_id", "horizon", "dimension", "choice",
                  "n", "best", "q25", "median", "iqr")


def _choice_stats(values: list[float]) -> tuple[float, float, float, float]:
    arr = np.array(values)
    q25, q50, q75 = np.percentile(arr, [25, 50, 75])  # linear interpolation
    return float(arr.min()), float(q25), float(q50), float(q75 - q25)


def report(records: list[ExperimentRecord],
           space=None) -> tuple[list[dict], list[str]]:
    """Per design dimension and choice: best / q25 / median / IQR of MSE,
    overall ("*" groups) and per (dataset, horizon). Returns (rows, notices)."""
    space = space if space is not None else default_space()
    ok = [r for r in records if r.status == "ok" and np.isfinite(r.mse)]
    notices = []
    skipped = len(records) - len(ok)
    if skipped:
        notices.append(f"omitted {skipped} failed or non-finite rows")
    if not ok:
        raise ValueError("no successful rows to report on")

    parsed = {}
    for r in records:
        if r.config_hash not in parsed:
            parsed[r.config_hash] = dict(
                item.split("=", 1) for item in r.config_text.split("|"))

    groups: dict[tuple, list[float]] = {}
    for r in ok:
        choices = parsed[r.config_hash]
        for dim_name, choice in choices.items():
            groups.setdefault(("*", "*", dim_name, choice), []).append(r.mse)
            groups.setdefault((r.dataset_id, str(r.horizon), dim_name, choice),
                              []).append(r.mse)

    rows = []
    for (ds, horizon, dim_name, choice) in sorted(groups):
        best, q25, median, iqr = _choice_stats(groups[(ds, horizon, dim_name, choice)])
        rows.append({"dataset_id": ds, "horizon": horizon, "dimension": dim_name,
                     "choice": choice, "n": len(groups[(ds, horizon, dim_name, choice)]),
                     "best": best, "q25": q25, "median": median, "iqr": iqr})
    for dim in space.sorted_dims:
        for choice in dim.instantiable():
            if ("*", "*", dim.name, choice) not in groups:
                notices.append(f"no rows for {dim.name}={choice}")
    return rows, notices


def write_report(rows: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(REPORT_COLUMNS) + "\n")
        for row in rows:
            fh.write("\t".join([str(row["dataset_id"]), str(row["horizon"]),
                                str(row["dimension"]), str(row["choice"]),
                                str(row["n"]), repr(row["best"]), repr(row["q25"]),
                                repr(row["median"]), repr(row["iqr"])]) + "\n")
