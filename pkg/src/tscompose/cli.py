"""Command-line front end tying the stages together.

Commands:
  enumerate     count (and optionally list) every valid pipeline configuration
  validate      check config files for membership and conflict-rule problems
  sample        draw configs uniformly or guided by a ledger of past scores
  run           train/evaluate every (dataset, config, horizon) cell
  meta extract  write dataset descriptor vectors as a versioned table
  meta train    fit the rank predictor from a finished ledger
  recommend     score candidate configs for a new dataset, print the top k
  report        aggregate a ledger per design dimension and choice

Datasets are given as either a CSV path (header row, ISO-8601 timestamp
column, numeric channels) or a synthetic spec `family[:seed[:length]]`, e.g.
`sin-trend:3:2000`.  Config files hold one config per line in the folded
`Dim=choice|Dim=choice` form, or a single config as key=value lines; blank
lines and `#` comments are ignored.

Exit codes: 0 success, 1 usage error, 2 data error, 3 pool finished with
failed cells.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

from .data import SYNTHETIC_FAMILIES, DataError, Dataset, load_csv, synthetic_dataset
from .features import FEATURE_VERSION, extract_meta_features, feature_names
from .meta import MetaPredictor, MetaTrainConfig, recommend, train_meta
from .runner import (
    LEDGER_NAME,
    LedgerError,
    RunnerConfig,
    assemble_meta_samples,
    read_ledger,
    report,
    run_pool,
    write_report,
)
from .space import (
    DEFAULT_RULES,
    PipelineConfig,
    config_from_text,
    count_valid,
    default_space,
    enumerate_space,
    sample_guided,
    sample_random,
    validate_config,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are 1
        raise _UsageError(message)


# ----------------------------------------------------------------- helpers

def parse_data_spec(spec: str) -> Dataset:
    if os.path.exists(spec):
        return load_csv(spec)
    parts = spec.split(":")
    if parts[0] in SYNTHETIC_FAMILIES:
        try:
            seed = int(parts[1]) if len(parts) > 1 else 0
            length = int(parts[2]) if len(parts) > 2 else 2000
        except ValueError:
            raise ValueError(f"bad synthetic spec {spec!r}; "
                             "expected family[:seed[:length]]") from None
        name = parts[0] if len(parts) == 1 else f"{parts[0]}:{seed}"
        return synthetic_dataset(parts[0], seed=seed, length=length, dataset_id=name)
    raise DataError(f"{spec!r} is neither an existing file nor a synthetic "
                    f"family ({', '.join(SYNTHETIC_FAMILIES)})")


def load_datasets(specs: list[str]) -> list[Dataset]:
    datasets = [parse_data_spec(s) for s in specs]
    seen = set()
    for ds in datasets:
        if ds.id in seen:
            raise ValueError(f"duplicate dataset id {ds.id!r}")
        seen.add(ds.id)
    return datasets


def parse_config_file(path: str, space) -> list[PipelineConfig]:
    """Folded one-config-per-line files and single key=value files."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read config file: {exc}") from None
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    try:
        if any("|" in ln for ln in lines):
            configs = [config_from_text(ln.replace("|", "\n"), space) for ln in lines]
        else:
            configs = [config_from_text(text, space)] if lines else []
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if not configs:
        raise DataError(f"{path}: no configs found")
    return configs


def _parse_fixed(items: list[str], space) -> dict[str, str]:
    fixed = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"--fixed expects Dimension=choice, got {item!r}")
        key, value = item.split("=", 1)
        try:
            space.dim(key)
        except KeyError as exc:
            raise ValueError(str(exc)) from None
        fixed[key] = value
    return fixed


def _parse_horizons(text: str) -> list[int]:
    try:
        horizons = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ValueError(f"bad horizon list {text!r}") from None
    if not horizons or any(h < 1 for h in horizons):
        raise ValueError(f"horizons must be positive integers, got {text!r}")
    return horizons


def _configs_from_ledger(records, space) -> list[PipelineConfig]:
    texts = {}
    for r in records:
        texts.setdefault(r.config_hash, r.config_text)
    return [config_from_text(t.replace("|", "\n"), space) for t in texts.values()]


def _out_path(args, name: str, override: str | None) -> str:
    if override:
        return override
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


# ---------------------------------------------------------------- commands

def cmd_enumerate(args) -> int:
    space = default_space()
    fixed = _parse_fixed(args.fixed, space)
    total = count_valid(space, DEFAULT_RULES, fixed=fixed)
    if not args.list:
        print(total)
        return 0
    shown = 0
    for config in enumerate_space(space, DEFAULT_RULES, fixed=fixed):
        if args.limit is not None and shown >= args.limit:
            break
        print(config.ledger_key())
        shown += 1
    print(f"{shown} of {total} valid configurations", file=sys.stderr)
    return 0


def cmd_validate(args) -> int:
    space = default_space()
    bad = 0
    for path in args.files:
        configs = parse_config_file(path, space)
        for i, config in enumerate(configs):
            label = path if len(configs) == 1 else f"{path}#{i + 1}"
            problems = validate_config(config, space, DEFAULT_RULES)
            if problems:
                bad += 1
                print(f"{label}: " + "; ".join(problems))
            else:
                print(f"{label}: ok")
    return 2 if bad else 0


def cmd_sample(args) -> int:
    space = default_space()
    fixed = _parse_fixed(args.fixed, space)
    if args.guided:
        if not args.ledger:
            raise ValueError("--guided needs --ledger for the score history")
        history = []
        for r in read_ledger(args.ledger):
            config = config_from_text(r.config_text.replace("|", "\n"), space)
            score = r.mse if r.status == "ok" and math.isfinite(r.mse) else math.inf
            history.append((config, score))
        configs = sample_guided(space, DEFAULT_RULES, history, args.m,
                                seed=args.seed, fixed=fixed)
    else:
        configs = sample_random(space, DEFAULT_RULES, args.m,
                                seed=args.seed, fixed=fixed)
    lines = "".join(c.ledger_key() + "\n" for c in configs)
    sys.stdout.write(lines)
    if args.configs_out:
        with open(args.configs_out, "w", encoding="utf-8") as fh:
            fh.write(lines)
    return 0


def cmd_run(args) -> int:
    space = default_space()
    datasets = load_datasets(args.data)
    configs = parse_config_file(args.configs, space)
    for config in configs:
        problems = validate_config(config, space, DEFAULT_RULES)
        if problems:
            raise DataError(f"{args.configs}: {config!r}: " + "; ".join(problems))
    rc = RunnerConfig(out_dir=args.out_dir, global_seed=args.seed, jobs=args.jobs,
                      batch_size=args.batch_size, patience=args.patience,
                      epoch_cap=args.epoch_cap, max_steps_per_epoch=args.max_steps,
                      limit=args.limit, denormalized=args.denormalized)
    records = run_pool(datasets, configs, _parse_horizons(args.horizons), rc)
    failed = sum(r.status != "ok" for r in records)
    print(f"{len(records) - failed} ok, {failed} failed -> "
          f"{os.path.join(args.out_dir, LEDGER_NAME)}")
    return 3 if failed else 0


def cmd_meta_extract(args) -> int:
    datasets = load_datasets(args.data)
    names = list(feature_names())
    path = _out_path(args, "meta_features.tsv", args.features_out)
    with open(path, "w", encoding="utf-8") as fh:
        header = ["dataset_id", "version"] + names + [f"mask_{n}" for n in names]
        fh.write("\t".join(header) + "\n")
        for ds in datasets:
            vec = extract_meta_features(ds.split("train").raw)
            cells = [ds.id, vec.version]
            cells += [repr(v) for v in vec.values.tolist()]
            cells += [str(int(m)) for m in vec.mask.tolist()]
            fh.write("\t".join(cells) + "\n")
    print(f"{len(datasets)} datasets x {len(names)} features -> {path}")
    return 0


def cmd_meta_train(args) -> int:
    space = default_space()
    datasets = load_datasets(args.data)
    records = read_ledger(args.ledger)
    if not records:
        raise DataError(f"{args.ledger}: empty ledger")
    configs = _configs_from_ledger(records, space)
    horizons = _parse_horizons(args.horizons)
    if len(horizons) > 1 and not args.all_pl:
        raise ValueError("multiple horizons need --all-pl")
    samples = []
    for horizon in horizons:
        samples.extend(assemble_meta_samples(datasets, configs, records, horizon))
    cfg = MetaTrainConfig(seed=args.seed, resample=args.resample, all_pl=args.all_pl)
    predictor = train_meta(samples, cfg)
    path = _out_path(args, "meta_model.npz", args.model_out)
    predictor.save(path)
    print(f"trained on {len(samples)} samples "
          f"({len(datasets)} datasets x {len(configs)} configs) -> {path}")
    return 0


def cmd_recommend(args) -> int:
    space = default_space()
    predictor = MetaPredictor.load(args.model)
    dataset = parse_data_spec(args.data)
    candidates = parse_config_file(args.configs, space)
    features = extract_meta_features(dataset.split("train").raw).as_array()
    top = recommend(predictor, features, candidates, args.k, horizon=args.horizon)
    for config in top:
        print(config.ledger_key())
    return 0


def cmd_report(args) -> int:
    records = read_ledger(args.ledger)
    if not records:
        raise DataError(f"{args.ledger}: empty ledger")
    try:
        rows, notices = report(records)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    path = _out_path(args, "report.tsv", args.report_out)
    write_report(rows, path)
    for notice in notices:
        print(f"notice: {notice}", file=sys.stderr)
    print(f"{len(rows)} rows -> {path}")
    return 0


# ------------------------------------------------------------------ parser

def _build_parser() -> _Parser:
    parser = _Parser(prog="tscompose", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seed", type=int, default=0, help="global seed (default 0)")
    parser.add_argument("--jobs", type=int, default=1, help="worker threads for run")
    parser.add_argument("--out-dir", default="runs",
                        help="directory for ledgers and other outputs (default runs)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enumerate", help="count valid configs")
    p.add_argument("--list", action="store_true", help="print configs, not just the count")
    p.add_argument("--limit", type=int, default=None, help="stop listing after N configs")
    p.add_argument("--fixed", action="append", default=[], metavar="DIM=CHOICE")
    p.set_defaults(fn=cmd_enumerate)

    p = sub.add_parser("validate", help="check config files")
    p.add_argument("files", nargs="+")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("sample", help="draw pipeline configs")
    p.add_argument("-m", type=int, required=True, help="number of configs")
    p.add_argument("--guided", action="store_true",
                   help="guided proposals from a ledger instead of uniform")
    p.add_argument("--random", dest="guided", action="store_false",
                   help="uniform sampling (default)")
    p.add_argument("--ledger", default=None, help="score history for --guided")
    p.add_argument("--fixed", action="append", default=[], metavar="DIM=CHOICE")
    p.add_argument("--configs-out", default=None, help="also write the sample to a file")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("run", help="train/evaluate a pool of cells")
    p.add_argument("--data", action="append", required=True,
                   help="CSV path or synthetic spec family[:seed[:length]] (repeatable)")
    p.add_argument("--configs", required=True, help="config file (see module help)")
    p.add_argument("--horizons", default="12,24", help="comma-separated, default 12,24")
    p.add_argument("--epoch-cap", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None,
                   help="cap optimizer steps per epoch")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--limit", type=int, default=None, help="run at most N new cells")
    p.add_argument("--denormalized", action="store_true",
                   help="metrics on the original value scale")
    p.set_defaults(fn=cmd_run)

    meta = sub.add_parser("meta", help="meta-feature and meta-predictor stages")
    meta_sub = meta.add_subparsers(dest="meta_command", required=True)

    p = meta_sub.add_parser("extract", help="write dataset descriptor vectors")
    p.add_argument("--data", action="append", required=True)
    p.add_argument("--features-out", default=None)
    p.set_defaults(fn=cmd_meta_extract)

    p = meta_sub.add_parser("train", help="fit the rank predictor from a ledger")
    p.add_argument("--ledger", required=True)
    p.add_argument("--data", action="append", required=True,
                   help="the datasets the ledger was built on")
    p.add_argument("--horizons", default="12", help="comma-separated; several need --all-pl")
    p.add_argument("--resample", action="store_true",
                   help="balance per-dataset sample counts by downsampling")
    p.add_argument("--all-pl", action="store_true",
                   help="pool horizons, appending the horizon to the features")
    p.add_argument("--model-out", default=None)
    p.set_defaults(fn=cmd_meta_train)

    p = sub.add_parser("recommend", help="top-k configs for a new dataset")
    p.add_argument("--model", required=True, help="trained predictor (.npz)")
    p.add_argument("--data", required=True, help="the new dataset")
    p.add_argument("--configs", required=True, help="candidate pool file")
    p.add_argument("-k", type=int, default=1)
    p.add_argument("--horizon", type=int, default=None,
                   help="needed for predictors trained with --all-pl")
    p.set_defaults(fn=cmd_recommend)

    p = sub.add_parser("report", help="aggregate a ledger per design choice")
    p.add_argument("--ledger", required=True)
    p.add_argument("--report-out", default=None)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except (DataError, LedgerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
