"""Pipeline design space: the 16-dimension choice registry, conflict rules,
enumeration, uniform sampling, and a TPE-style guided sampler.

A pipeline configuration is one choice per dimension.  Its canonical form is
the sorted ``name=choice`` line list; the 64-bit FNV-1a of that text is the
config's content hash and the identity used everywhere downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1

COLD_START_TRIALS = 50
TPE_GAMMA = 0.25
TPE_CANDIDATES = 24
TPE_MAX_RETRIES = 100


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class DesignDimension:
    name: str
    choices: tuple[str, ...]
    stage: str                                   # preprocess|encode|architecture|optimize
    reserved: frozenset[str] = frozenset()       # listed but non-instantiable

    def instantiable(self) -> tuple[str, ...]:
        return tuple(c for c in self.choices if c not in self.reserved)


@dataclass(frozen=True)
class ConflictRule:
    name: str
    dims: tuple[str, ...]
    predicate: Callable[[dict], bool]            # True when the config violates
    reason: Callable[[dict], str]

    def violates(self, choices: dict) -> bool:
        return self.predicate(choices)


class PipelineConfig:
    """Immutable: one choice per dimension, hashed over the canonical text."""

    __slots__ = ("choices", "_text", "_hash")

    def __init__(self, choices: dict[str, str]):
        self.choices = dict(choices)
        self._text = None
        self._hash = None

    def __getitem__(self, dim: str) -> str:
        return self.choices[dim]

    def canonical_text(self) -> str:
        if self._text is None:
            self._text = "\n".join(f"{k}={v}" for k, v in sorted(self.choices.items()))
        return self._text

    def content_hash(self) -> int:
        if self._hash is None:
            self._hash = fnv1a_64(self.canonical_text().encode("utf-8"))
        return self._hash

    def ledger_key(self) -> str:
        return "|".join(f"{k}={v}" for k, v in sorted(self.choices.items()))

    def with_choice(self, dim: str, choice: str) -> "PipelineConfig":
        updated = dict(self.choices)
        updated[dim] = choice
        return PipelineConfig(updated)

    def __eq__(self, other) -> bool:
        return isinstance(other, PipelineConfig) and self.choices == other.choices

    def __hash__(self) -> int:
        return self.content_hash()

    def __repr__(self) -> str:
        return f"PipelineConfig({self.content_hash():016x})"

    # typed accessors -------------------------------------------------
    def seq_len(self) -> int:
        return int(self["Sequence Length"])

    def widths(self) -> tuple[int, int]:
        d_model, d_ff = self["d_model d_ff"].split("-")
        return int(d_model), int(d_ff)

    def encoder_layers(self) -> int:
        return int(self["Encoder Layers"])

    def epochs(self) -> int:
        return int(self["Epochs"])

    def learning_rate(self) -> float:
        return float(self["Learning Rate"])

    def channel_independent(self) -> bool:
        return self["Channel Independent"] == "True"

    def multiscale(self) -> bool:
        return self["Series Sampling/Mixing"] == "True"

    def with_timestamps(self) -> bool:
        return self["With/Without Timestamps"] == "True"


def _table_dimensions() -> tuple[DesignDimension, ...]:
    return (
        DesignDimension("Series Normalization", ("None", "Stat", "RevIN", "DishTS"), "preprocess"),
        DesignDimension("Series Decomposition", ("None", "MA", "MoEMA", "DFT"), "preprocess"),
        DesignDimension("Series Sampling/Mixing", ("False", "True"), "preprocess"),
        DesignDimension("Channel Independent", ("False", "True"), "encode"),
        DesignDimension("Sequence Length", ("48", "96", "192", "512"), "encode"),
        DesignDimension("Series Embedding",
                        ("Inverted Encoding", "Positional Encoding", "Series Patching"), "encode"),
        DesignDimension("With/Without Timestamps", ("False", "True"), "encode"),
        DesignDimension("Network Type", ("MLP", "RNN", "Transformer", "LLM", "TSFM"),
                        "architecture", frozenset({"LLM", "TSFM"})),
        DesignDimension("Series Attention",
                        ("Null", "SelfAttn", "AutoCorr", "SparseAttn",
                         "FrequencyAttn", "DestationaryAttn"), "architecture"),
        DesignDimension("Feature Attention",
                        ("Null", "SelfAttn", "SparseAttn", "FrequencyAttn"), "architecture"),
        DesignDimension("d_model d_ff", ("64-256", "256-1024"), "architecture"),
        DesignDimension("Encoder Layers", ("2", "3"), "architecture"),
        DesignDimension("Epochs", ("10", "20", "50"), "optimize"),
        DesignDimension("Loss Function", ("MSE", "MAE", "HUBER"), "optimize"),
        DesignDimension("Learning Rate", ("1e-3", "1e-4"), "optimize"),
        DesignDimension("Learning Rate Strategy", ("Null", "Type1"), "optimize"),
    )


class DesignSpace:
    def __init__(self, dimensions: tuple[DesignDimension, ...] | None = None):
        self.dimensions = dimensions if dimensions is not None else _table_dimensions()
        self._by_name = {d.name: d for d in self.dimensions}
        if len(self._by_name) != len(self.dimensions):
            raise ValueError("duplicate dimension names")
        self.sorted_dims = tuple(sorted(self.dimensions, key=lambda d: d.name))

    def dim(self, name: str) -> DesignDimension:
        if name not in self._by_name:
            raise KeyError(f"unknown design dimension {name!r}")
        return self._by_name[name]

    def dim_names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.dimensions)

    def choice_index(self, dim: str, choice: str) -> int:
        return self.dim(dim).choices.index(choice)

    def size_raw(self, include_reserved: bool = False) -> int:
        out = 1
        for d in self.dimensions:
            out *= len(d.choices) if include_reserved else len(d.instantiable())
        return out


def default_space() -> DesignSpace:
    return DesignSpace()


# --------------------------------------------------------------------- rules

def _mlp_rnn(choices: dict) -> bool:
    return choices["Network Type"] in ("MLP", "RNN")


DEFAULT_RULES: tuple[ConflictRule, ...] = (
    ConflictRule(
        "backbone-series-attention",
        ("Network Type", "Series Attention"),
        lambda c: _mlp_rnn(c) and c["Series Attention"] != "Null",
        lambda c: f"{c['Network Type']} excludes series attention",
    ),
    ConflictRule(
        "backbone-feature-attention",
        ("Network Type", "Feature Attention"),
        lambda c: _mlp_rnn(c) and c["Feature Attention"] != "Null",
        lambda c: f"{c['Network Type']} excludes feature attention",
    ),
    ConflictRule(
        "destationary-needs-statistics",
        ("Series Attention", "Series Normalization"),
        lambda c: (c["Series Attention"] == "DestationaryAttn"
                   and c["Series Normalization"] not in ("Stat", "RevIN")),
        lambda c: "DestationaryAttn requires location/scale statistics "
                  "(Series Normalization must be Stat or RevIN)",
    ),
    ConflictRule(
        "inverted-needs-channel-mixing",
        ("Series Embedding", "Channel Independent"),
        lambda c: (c["Series Embedding"] == "Inverted Encoding"
                   and c["Channel Independent"] == "True"),
        lambda c: "Inverted Encoding tokenizes whole variates and requires "
                  "Channel Independent=False",
    ),
    ConflictRule(
        "inverted-excludes-feature-attention",
        ("Series Embedding", "Feature Attention"),
        lambda c: (c["Series Embedding"] == "Inverted Encoding"
                   and c["Feature Attention"] != "Null"),
        lambda c: "Inverted Encoding already mixes variates on the token axis; "
                  "feature attention must be Null",
    ),
    ConflictRule(
        "patching-needs-length",
        ("Series Embedding", "Sequence Length"),
        lambda c: (c["Series Embedding"] == "Series Patching"
                   and int(c["Sequence Length"]) < 16),
        lambda c: f"Series Patching needs sequence length >= 16, "
                  f"got {c['Sequence Length']}",
    ),
)


def violations(choices: dict, rules: tuple[ConflictRule, ...] = DEFAULT_RULES) -> list[str]:
    return [rule.reason(choices) for rule in rules if rule.violates(choices)]


def validate_config(config: PipelineConfig, space: DesignSpace,
                    rules: tuple[ConflictRule, ...] = DEFAULT_RULES,
                    include_reserved: bool = False) -> list[str]:
    """Membership errors and rule violations, as human-readable strings."""
    problems = []
    seen = set(config.choices)
    expected = set(space.dim_names())
    for missing in sorted(expected - seen):
        problems.append(f"missing dimension {missing!r}")
    for extra in sorted(seen - expected):
        problems.append(f"unknown dimension {extra!r}")
    for name in sorted(seen & expected):
        dim = space.dim(name)
        choice = config[name]
        if choice not in dim.choices:
            problems.append(f"unknown choice {choice!r} for dimension {name!r}")
        elif not include_reserved and choice in dim.reserved:
            problems.append(f"choice {choice!r} for dimension {name!r} is not instantiable")
    if not problems:
        problems.extend(violations(config.choices, rules))
    return problems


# --------------------------------------------------------------- enumeration

class _Walker:
    """Shared machinery for counting / streaming / unranking the valid space.

    Dimensions are walked in sorted-name order; choices in registry order.
    Rules touch a small dim subset, so subtree counts depend only on the
    rule-relevant part of the prefix — memoized for fast counting/unranking.
    """

    def __init__(self, space: DesignSpace, rules: tuple[ConflictRule, ...],
                 fixed: dict[str, str] | None = None,
                 include_reserved: bool = False):
        self.space = space
        self.rules = tuple(rules)
        fixed = fixed or {}
        for name, choice in fixed.items():
            if choice not in space.dim(name).choices:
                raise ValueError(f"unknown choice {choice!r} for dimension {name!r}")
        self.dims = space.sorted_dims
        self.choice_lists = []
        for d in self.dims:
            pool = d.choices if include_reserved else d.instantiable()
            if d.name in fixed:
                if fixed[d.name] not in pool:
                    raise ValueError(f"fixed choice {fixed[d.name]!r} not available "
                                     f"in dimension {d.name!r}")
                pool = (fixed[d.name],)
            self.choice_lists.append(pool)

        index_of = {d.name: i for i, d in enumerate(self.dims)}
        self.rules_at = [[] for _ in self.dims]
        for rule in self.rules:
            depth = max(index_of[name] for name in rule.dims)
            self.rules_at[depth].append(rule)
        self.relevant = frozenset(n for rule in self.rules for n in rule.dims)
        self._memo: dict = {}

    def _key(self, depth: int, assignment: dict) -> tuple:
        return (depth, tuple(assignment[d.name] for d in self.dims[:depth]
                             if d.name in self.relevant))

    def count(self, depth: int = 0, assignment: dict | None = None) -> int:
        assignment = assignment if assignment is not None else {}
        if depth == len(self.dims):
            return 1
        # past the last rule-relevant dimension the tail multiplies freely
        if not any(self.rules_at[i] for i in range(depth, len(self.dims))):
            out = 1
            for pool in self.choice_lists[depth:]:
                out *= len(pool)
            return out
        key = self._key(depth, assignment)
        if key in self._memo:
            return self._memo[key]
        dim = self.dims[depth]
        total = 0
        for choice in self.choice_lists[depth]:
            assignment[dim.name] = choice
            if any(r.violates(assignment) for r in self.rules_at[depth]):
                continue
            total += self.count(depth + 1, assignment)
        assignment.pop(dim.name, None)
        self._memo[key] = total
        return total

    def stream(self, depth: int = 0, assignment: dict | None = None,
               running_hash: int = FNV_OFFSET) -> Iterator[PipelineConfig]:
        assignment = assignment if assignment is not None else {}
        if depth == len(self.dims):
            config = PipelineConfig(assignment)
            config._hash = running_hash
            yield config
            return
        dim = self.dims[depth]
        prefix = ("" if depth == 0 else "\n") + dim.name + "="
        for choice in self.choice_lists[depth]:
            assignment[dim.name] = choice
            if any(r.violates(assignment) for r in self.rules_at[depth]):
                continue
            h = running_hash
            for b in (prefix + choice).encode("utf-8"):
                h = ((h ^ b) * FNV_PRIME) & _MASK64
            yield from self.stream(depth + 1, assignment, h)
        assignment.pop(dim.name, None)

    def unrank(self, index: int) -> PipelineConfig:
        if index < 0 or index >= self.count():
            raise IndexError(f"config index {index} out of range")
        assignment: dict[str, str] = {}
        remaining = index
        for depth, dim in enumerate(self.dims):
            for choice in self.choice_lists[depth]:
                assignment[dim.name] = choice
                if any(r.violates(assignment) for r in self.rules_at[depth]):
                    continue
                sub = self.count(depth + 1, assignment)
                if remaining < sub:
                    break
                remaining -= sub
            else:
                raise RuntimeError("unrank walked off the valid space")
        return PipelineConfig(assignment)


def count_valid(space: DesignSpace, rules: tuple[ConflictRule, ...] = DEFAULT_RULES,
                fixed: dict[str, str] | None = None,
                include_reserved: bool = False) -> int:
    return _Walker(space, rules, fixed, include_reserved).count()


def enumerate_space(space: DesignSpace, rules: tuple[ConflictRule, ...] = DEFAULT_RULES,
                    fixed: dict[str, str] | None = None,
                    include_reserved: bool = False) -> Iterator[PipelineConfig]:
    yield from _Walker(space, rules, fixed, include_reserved).stream()


def all_hashes(space: DesignSpace, include_reserved: bool = False,
               fixed: dict[str, str] | None = None) -> np.ndarray:
    """FNV-1a hashes of the full unfiltered product, vectorized, in the same
    nesting order as enumeration.  Prefix states are shared level by level, so
    each canonical-text byte is processed once per distinct prefix."""
    fixed = fixed or {}
    prime = np.uint64(FNV_PRIME)
    states = np.array([FNV_OFFSET], dtype=np.uint64)
    for depth, dim in enumerate(space.sorted_dims):
        pool = dim.choices if include_reserved else dim.instantiable()
        if dim.name in fixed:
            pool = (fixed[dim.name],)
        prefix = ("" if depth == 0 else "\n") + dim.name + "="
        branches = np.empty((len(pool), states.size), dtype=np.uint64)
        for j, choice in enumerate(pool):
            s = states.copy()
            for b in (prefix + choice).encode("utf-8"):
                s = (s ^ np.uint64(b)) * prime
            branches[j] = s
        # choice axis must vary fastest within each prefix block
        states = branches.T.reshape(-1)
    return states


def scan_hash_collisions(space: DesignSpace, include_reserved: bool = False,
                         fixed: dict[str, str] | None = None) -> tuple[int, int]:
    """(total configs, distinct hashes) over the raw product — a superset of
    every rule-filtered space, so distinct==total certifies injectivity."""
    hashes = all_hashes(space, include_reserved, fixed)
    return hashes.size, int(np.unique(hashes).size)


# ------------------------------------------------------------------ sampling

def sample_random(space: DesignSpace, rules: tuple[ConflictRule, ...],
                  m: int, seed: int,
                  fixed: dict[str, str] | None = None) -> list[PipelineConfig]:
    walker = _Walker(space, rules, fixed)
    total = walker.count()
    if m > total:
        raise ValueError(f"requested {m} distinct configs from a space of {total}")
    rng = np.random.default_rng(seed)
    indices = rng.choice(total, size=m, replace=False)
    return [walker.unrank(int(i)) for i in indices]


def _tpe_densities(space: DesignSpace, configs: list[PipelineConfig]) -> dict[str, np.ndarray]:
    """Laplace-smoothed categorical frequency per dimension (+1 per choice)."""
    out = {}
    for dim in space.dimensions:
        pool = dim.instantiable()
        counts = np.ones(len(pool))
        for config in configs:
            counts[pool.index(config[dim.name])] += 1.0
        out[dim.name] = counts / counts.sum()
    return out


def sample_guided(space: DesignSpace, rules: tuple[ConflictRule, ...],
                  history: list[tuple[PipelineConfig, float]],
                  n_new: int, seed: int,
                  fixed: dict[str, str] | None = None) -> list[PipelineConfig]:
    """TPE-style proposals: model good/bad choice densities at the gamma
    quantile split (lower score = better) and maximize l/g over candidates."""
    if len(history) < COLD_START_TRIALS:
        return sample_random(space, rules, n_new, seed, fixed)

    ranked = sorted(history, key=lambda item: item[1])
    n_good = max(1, math.ceil(TPE_GAMMA * len(ranked)))
    good = _tpe_densities(space, [c for c, _ in ranked[:n_good]])
    bad = _tpe_densities(space, [c for c, _ in ranked[n_good:]])

    rng = np.random.default_rng(seed)
    pools = {d.name: d.instantiable() for d in space.dimensions}
    fixed = fixed or {}

    def propose() -> tuple[dict, float]:
        choices, score = {}, 0.0
        for name, pool in pools.items():
            if name in fixed:
                choices[name] = fixed[name]
                continue
            idx = rng.choice(len(pool), p=good[name])
            choices[name] = pool[idx]
            score += math.log(good[name][idx]) - math.log(bad[name][idx])
        return choices, score

    out = []
    for _ in range(n_new):
        accepted = None
        for _ in range(TPE_MAX_RETRIES):
            candidates = [propose() for _ in range(TPE_CANDIDATES)]
            best, _ = max(candidates, key=lambda item: item[1])
            if not violations(best, rules):
                accepted = PipelineConfig(best)
                break
        if accepted is None:
            accepted = sample_random(space, rules, 1, int(rng.integers(2**31)), fixed)[0]
        out.append(accepted)
    return out


# ----------------------------------------------------------------- parsing

def config_from_text(text: str, space: DesignSpace) -> PipelineConfig:
    """Parse the key=value canonical form (one dimension per line)."""
    choices = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if key in choices:
            raise ValueError(f"line {lineno}: duplicate dimension {key!r}")
        choices[key] = value
    return PipelineConfig(choices)
