"""Experiment pool: ledger mechanics, resume safety, failure policy, report."""

import os
import statistics

import numpy as np
import pytest

from tscompose.data import synthetic_dataset
from tscompose.meta import rank_normalize
from tscompose.runner import (
    LEDGER_COLUMNS,
    LEDGER_NAME,
    ExperimentRecord,
    LedgerError,
    RunnerConfig,
    assemble_meta_samples,
    build_performance_matrix,
    cell_seed,
    read_ledger,
    report,
    run_pool,
    write_report,
)
from tscompose.space import DEFAULT_RULES, default_space, sample_random

FIXED = {"Sequence Length": "48", "d_model d_ff": "64-256"}


def small_pool_inputs():
    datasets = [
        synthetic_dataset("sin-trend", seed=11, length=640),
        synthetic_dataset("ar2-season", seed=12, length=640),
    ]
    configs = sample_random(default_space(), DEFAULT_RULES, 3, seed=21, fixed=FIXED)
    return datasets, configs


def quick_rc(out_dir, **kw):
    kw.setdefault("global_seed", 3)
    kw.setdefault("epoch_cap", 1)
    kw.setdefault("max_steps_per_epoch", 2)
    return RunnerConfig(out_dir=str(out_dir), **kw)


@pytest.fixture(scope="module")
def finished_pool(tmp_path_factory):
    """One real 2 datasets x 3 configs x 1 horizon pool, shared across tests."""
    out = tmp_path_factory.mktemp("pool")
    datasets, configs = small_pool_inputs()
    records = run_pool(datasets, configs, [12], quick_rc(out))
    ledger_bytes = (out / LEDGER_NAME).read_bytes()
    return datasets, configs, records, out, ledger_bytes


# ------------------------------------------------------------------ seeds

def test_cell_seed_is_deterministic_and_sensitive():
    cfg_a, cfg_b = sample_random(default_space(), DEFAULT_RULES, 2, seed=0)
    base = cell_seed(7, "etth1", cfg_a, 24)
    assert base == cell_seed(7, "etth1", cfg_a, 24)
    assert base != cell_seed(8, "etth1", cfg_a, 24)
    assert base != cell_seed(7, "etth2", cfg_a, 24)
    assert base != cell_seed(7, "etth1", cfg_b, 24)
    assert base != cell_seed(7, "etth1", cfg_a, 12)


# ------------------------------------------------------------------ records

def test_record_line_roundtrip():
    rec = ExperimentRecord("ds", "00ab" * 4, 24, 991, "ok", 0.123456789012345,
                           0.25, "A=1|B=x y")
    back = ExperimentRecord.from_line(rec.to_line() + "\n")
    assert back == rec


def test_failed_record_roundtrips_nan():
    rec = ExperimentRecord("ds", "0" * 16, 12, 5, "failed", float("nan"),
                           float("nan"), "A=1")
    back = ExperimentRecord.from_line(rec.to_line())
    assert back.status == "failed"
    assert np.isnan(back.mse) and np.isnan(back.mae)


def test_read_ledger_missing_file(tmp_path):
    assert read_ledger(str(tmp_path / "nope.tsv")) == []


def test_read_ledger_rejects_bad_header(tmp_path):
    path = tmp_path / "ledger.tsv"
    path.write_text("a\tb\n", encoding="utf-8")
    with pytest.raises(LedgerError, match="header"):
        read_ledger(str(path))


def test_read_ledger_rejects_duplicate_key(tmp_path):
    line = ExperimentRecord("ds", "0" * 16, 12, 5, "ok", 1.0, 1.0, "A=1").to_line()
    path = tmp_path / "ledger.tsv"
    path.write_text("\t".join(LEDGER_COLUMNS) + "\n" + line + "\n" + line + "\n",
                    encoding="utf-8")
    with pytest.raises(LedgerError, match="duplicate"):
        read_ledger(str(path))


def test_read_ledger_ignores_torn_final_line(tmp_path):
    keep = ExperimentRecord("ds", "0" * 16, 12, 5, "ok", 1.0, 1.0, "A=1").to_line()
    path = tmp_path / "ledger.tsv"
    path.write_text("\t".join(LEDGER_COLUMNS) + "\n" + keep + "\n" + keep[: len(keep) // 2],
                    encoding="utf-8")
    records = read_ledger(str(path))
    assert len(records) == 1 and records[0].dataset_id == "ds"


# ------------------------------------------------------------------ pool runs

def test_pool_writes_one_row_per_cell(finished_pool):
    datasets, configs, records, out, _ = finished_pool
    assert len(records) == len(datasets) * len(configs)  # 2 x 3 x 1 horizon = 6
    assert len({r.key for r in records}) == len(records)
    assert all(r.status == "ok" for r in records)
    assert all(np.isfinite(r.mse) and np.isfinite(r.mae) for r in records)
    lines = (out / LEDGER_NAME).read_text(encoding="utf-8").splitlines()
    assert lines[0] == "\t".join(LEDGER_COLUMNS)
    assert len(lines) == 1 + len(records)


def test_pool_rows_are_in_canonical_order(finished_pool):
    datasets, configs, records, _, _ = finished_pool
    expected = [(ds.id, f"{cfg.content_hash():016x}", 12)
                for ds in sorted(datasets, key=lambda d: d.id)
                for cfg in configs]
    assert [r.key for r in records] == expected


def test_pool_resume_adds_nothing(finished_pool):
    datasets, configs, records, out, ledger_bytes = finished_pool
    again = run_pool(datasets, configs, [12], quick_rc(out))
    assert [r.key for r in again] == [r.key for r in records]
    assert (out / LEDGER_NAME).read_bytes() == ledger_bytes


def test_interrupted_then_resumed_ledger_is_byte_identical(finished_pool, tmp_path):
    datasets, configs, _, _, ledger_bytes = finished_pool
    out = tmp_path / "partial"
    run_pool(datasets, configs, [12], quick_rc(out, limit=2))
    partial = (out / LEDGER_NAME).read_bytes()
    assert ledger_bytes.startswith(partial) and partial != ledger_bytes
    run_pool(datasets, configs, [12], quick_rc(out))
    assert (out / LEDGER_NAME).read_bytes() == ledger_bytes


def test_resume_repairs_torn_tail(finished_pool, tmp_path):
    datasets, configs, _, _, ledger_bytes = finished_pool
    out = tmp_path / "torn"
    run_pool(datasets, configs, [12], quick_rc(out, limit=3))
    path = out / LEDGER_NAME
    path.write_bytes(path.read_bytes()[:-9])  # kill mid-append
    run_pool(datasets, configs, [12], quick_rc(out))
    assert path.read_bytes() == ledger_bytes


def test_parallel_pool_produces_identical_bytes(finished_pool, tmp_path):
    datasets, configs, _, _, ledger_bytes = finished_pool
    out = tmp_path / "jobs2"
    run_pool(datasets, configs, [12], quick_rc(out, jobs=2))
    assert (out / LEDGER_NAME).read_bytes() == ledger_bytes


def test_failing_cell_is_recorded_not_raised(tmp_path):
    # val split (10% of 700 = 70 rows) fits seq 48 + horizon 12 but not seq 96
    dataset = synthetic_dataset("sin-trend", seed=4, length=700)
    ok_cfg = sample_random(default_space(), DEFAULT_RULES, 1, seed=31, fixed=FIXED)[0]
    bad_cfg = ok_cfg.with_choice("Sequence Length", "96")
    records = run_pool([dataset], [ok_cfg, bad_cfg], [12], quick_rc(tmp_path))
    by_hash = {r.config_hash: r for r in records}
    ok = by_hash[f"{ok_cfg.content_hash():016x}"]
    bad = by_hash[f"{bad_cfg.content_hash():016x}"]
    assert ok.status == "ok" and np.isfinite(ok.mse)
    assert bad.status == "failed" and np.isnan(bad.mse) and np.isnan(bad.mae)

    matrix = build_performance_matrix(records, [dataset.id], [ok_cfg, bad_cfg], 12)
    assert matrix[0, 1] == pytest.approx(2.0 * ok.mse)
    ranks = rank_normalize(matrix)
    assert ranks[0, 1] == 1.0  # failure ranks worst


# ------------------------------------------------------------------ matrix

def _record(ds, cfg_hash, mse, status="ok", horizon=12):
    return ExperimentRecord(ds, cfg_hash, horizon, 0, status, mse,
                            mse / 2.0 if np.isfinite(mse) else mse, "A=1")


def test_matrix_uses_mse_and_fills_failures():
    h = [f"{i:016x}" for i in range(3)]
    records = [_record("d1", h[0], 1.0), _record("d1", h[1], 4.0),
               _record("d1", h[2], float("nan"), status="failed"),
               _record("d2", h[0], float("nan"), status="failed"),
               _record("d2", h[1], float("nan"), status="failed")]

    class Stub:
        def __init__(self, hx):
            self._h = int(hx, 16)

        def content_hash(self):
            return self._h

    matrix = build_performance_matrix(records, ["d1", "d2"], [Stub(x) for x in h], 12)
    assert matrix[0].tolist() == [1.0, 4.0, 8.0]       # fill = 2 x row max
    assert matrix[1].tolist() == [1.0, 1.0, 1.0]       # no finite cell in row


def test_missing_cells_count_as_failures():
    h = [f"{i:016x}" for i in range(2)]

    class Stub:
        def __init__(self, hx):
            self._h = int(hx, 16)

        def content_hash(self):
            return self._h

    matrix = build_performance_matrix([_record("d1", h[0], 2.0)], ["d1"],
                                      [Stub(x) for x in h], 12)
    assert matrix[0].tolist() == [2.0, 4.0]


# ------------------------------------------------------------------ report

def test_report_single_row_has_degenerate_stats():
    rows, _ = report([_record("d1", "0" * 16, 3.5)])
    assert rows, "expected at least one group"
    for row in rows:
        assert row["n"] == 1
        assert row["best"] == row["median"] == 3.5
        assert row["iqr"] == 0.0


def test_report_quartiles_use_linear_interpolation():
    records = [_record(f"d{i}", "0" * 16, float(v)) for i, v in enumerate([1, 2, 3, 4])]
    rows, _ = report(records)
    overall = [r for r in rows if r["dataset_id"] == "*" and r["dimension"] == "A"]
    assert len(overall) == 1
    row = overall[0]
    assert row["n"] == 4
    assert row["best"] == 1.0
    assert row["q25"] == pytest.approx(1.75)
    assert row["median"] == pytest.approx(2.5)
    assert row["iqr"] == pytest.approx(3.25 - 1.75)


def test_report_omits_failures_with_notice():
    records = [_record("d1", "0" * 16, 1.0),
               _record("d2", "0" * 16, float("nan"), status="failed")]
    rows, notices = report(records)
    assert all(row["n"] == 1 for row in rows if row["dataset_id"] == "*")
    assert any("omitted 1" in n for n in notices)


def test_report_requires_a_successful_row():
    with pytest.raises(ValueError, match="no successful rows"):
        report([_record("d1", "0" * 16, float("nan"), status="failed")])


def test_report_medians_match_independent_aggregation(finished_pool):
    _, _, records, out, _ = finished_pool
    # independent pass over the raw file: stdlib parsing + statistics.median
    by_choice = {}
    lines = (out / LEDGER_NAME).read_text(encoding="utf-8").splitlines()[1:]
    for line in lines:
        parts = line.split("\t")
        if parts[4] != "ok":
            continue
        for item in parts[7].split("|"):
            dim, choice = item.split("=", 1)
            by_choice.setdefault((dim, choice), []).append(float(parts[5]))
    rows, _ = report(records)
    reported = {(r["dimension"], r["choice"]): r for r in rows
                if r["dataset_id"] == "*"}
    assert set(reported) == set(by_choice)
    for key, values in by_choice.items():
        assert reported[key]["median"] == pytest.approx(statistics.median(values), abs=1e-12)
        assert reported[key]["n"] == len(values)
        assert reported[key]["best"] == min(values)


def test_report_notices_uncovered_choices(finished_pool):
    _, _, records, _, _ = finished_pool
    _, notices = report(records)
    # 3 configs cannot cover the whole space; spot-check the message shape
    assert any(n.startswith("no rows for ") for n in notices)


def test_write_report_tsv(tmp_path, finished_pool):
    _, _, records, _, _ = finished_pool
    rows, _ = report(records)
    path = tmp_path / "report.tsv"
    write_report(rows, str(path))
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0].split("\t") == ["dataset_id", "horizon", "dimension", "choice",
                                    "n", "best", "q25", "median", "iqr"]
    assert len(lines) == 1 + len(rows)


# ------------------------------------------------------------------ meta glue

def test_assemble_meta_samples(finished_pool):
    datasets, configs, records, _, _ = finished_pool
    samples = assemble_meta_samples(datasets, configs, records, 12)
    assert len(samples) == len(datasets) * len(configs)
    ranks = np.array([s.rank for s in samples]).reshape(len(datasets), len(configs))
    for row in ranks:
        assert sorted(row.tolist()) == [1 / 3, 2 / 3, 1.0]
    widths = {s.features.shape for s in samples}
    assert widths == {(902,)}
    assert all(s.horizon == 12 for s in samples)
    # samples keep the caller's dataset order and pair ranks with the right cells
    assert [s.dataset_id for s in samples[:: len(configs)]] == [d.id for d in datasets]
    mse_by_key = {(r.dataset_id, r.config_hash): r.mse for r in records}
    for ds_block in range(len(datasets)):
        block = samples[ds_block * len(configs):(ds_block + 1) * len(configs)]
        mses = [mse_by_key[(s.dataset_id, f"{s.config.content_hash():016x}")] for s in block]
        best = min(range(len(block)), key=lambda i: mses[i])
        assert block[best].rank == pytest.approx(1 / 3)
