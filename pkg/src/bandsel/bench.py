"""Benchmark tables: build, store, query, Oracle/regret and cross-table analyses."""

from __future__ import annotations

import json
import math
import os
import time
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .hsi import BandCombination, TaskSpec, count_combinations, format_bc, task_spec, unrank_combination


class SchemaError(ValueError):
    """A malformed line in a table file."""


class EvaluationError(RuntimeError):
    def __init__(self, bc, seed, cause):
        super().__init__(f"evaluator failed on bands {format_bc(bc)} seed {seed}: {cause}")
        self.bc = bc
        self.seed = seed


@dataclass(frozen=True, order=True)
class BenchKey:
    task: str
    dataset_id: str
    backbone_id: str
    bands: BandCombination

    def __post_init__(self):
        bands = tuple(int(b) for b in self.bands)
        if list(bands) != sorted(set(bands)):
            raise ValueError(f"bands {bands} must be strictly increasing")
        object.__setattr__(self, "bands", bands)


@dataclass(frozen=True)
class BenchRecord:
    key: BenchKey
    seeds: Mapping[int, Mapping[str, float]]
    cost_seconds: float = 0.0

    def mean(self) -> dict[str, float]:
        metrics = next(iter(self.seeds.values())).keys()
        return {m: float(np.mean([s[m] for s in self.seeds.values()])) for m in metrics}


@dataclass(frozen=True)
class BenchTable:
    task: TaskSpec
    records: Mapping[BenchKey, BenchRecord] = field(default_factory=dict)

    def __post_init__(self):
        by_bands: dict[BandCombination, BenchKey] = {}
        for key, rec in self.records.items():
            if rec.key != key:
                raise ValueError(f"record key mismatch for {key}")
            if key.task != self.task.kind:
                raise ValueError(f"record task {key.task!r} differs from table task {self.task.kind!r}")
            if not rec.seeds:
                raise ValueError(f"record {format_bc(key.bands)} has no seeds")
            for seed, metrics in rec.seeds.items():
                missing = set(self.task.metrics) - set(metrics)
                if missing:
                    raise ValueError(
                        f"record {format_bc(key.bands)} seed {seed} lacks metrics {sorted(missing)}"
                    )
            by_bands.setdefault(key.bands, key)
        object.__setattr__(self, "_by_bands", by_bands)

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, item) -> bool:
        if isinstance(item, BenchKey):
            return item in self.records
        return tuple(item) in self._by_bands

    def bands(self) -> list[BandCombination]:
        return sorted(self._by_bands)

    def resolve(self, key) -> BenchKey:
        """Accept a BenchKey or a bare band tuple (first matching record)."""
        if isinstance(key, BenchKey):
            if key not in self.records:
                raise KeyError(key)
            return key
        bands = tuple(int(b) for b in key)
        try:
            return self._by_bands[bands]
        except KeyError:
            raise KeyError(bands) from None

    def record(self, key) -> BenchRecord:
        return self.records[self.resolve(key)]

    def values(self, metric: str) -> dict[BandCombination, float]:
        """Seed-averaged ``metric`` per band combination."""
        self.task.higher_is_better(metric)
        return {k.bands: r.mean()[metric] for k, r in self.records.items()}


def _threads(workers: int | None) -> int:
    if workers is not None:
        return max(1, workers)
    env = os.environ.get("BSS_THREADS")
    return max(1, int(env)) if env else 1


def build_table(evaluator, bcs: Sequence[Sequence[int]], seeds: Sequence[int], workers: int | None = None) -> BenchTable:
    """Evaluate every band combination under every seed.

    Evaluations may run on a thread pool (``workers`` or ``$BSS_THREADS``);
    records are assembled by key, so the table does not depend on scheduling.
    """
    bcs = [tuple(int(b) for b in bc) for bc in bcs]
    if not bcs:
        raise ValueError("no band combinations to evaluate")
    if len(set(bcs)) != len(bcs):
        dup = next(bc for i, bc in enumerate(bcs) if bc in bcs[:i])
        raise ValueError(f"duplicate band combination {format_bc(dup)}")
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")

    def run(bc):
        start = time.perf_counter()
        out = {}
        for seed in seeds:
            try:
                out[seed] = {k: float(v) for k, v in evaluator(bc, seed).items()}
            except Exception as exc:
                raise EvaluationError(bc, seed, exc) from exc
        return bc, out, time.perf_counter() - start

    n = _threads(workers)
    if n == 1:
        results = [run(bc) for bc in bcs]
    else:
        with ThreadPoolExecutor(n) as pool:
            results = list(pool.map(run, bcs))
    task = evaluator.task
    records = {}
    for bc, per_seed, cost in results:
        key = BenchKey(task.kind, evaluator.dataset_id, evaluator.backbone_id, bc)
        metrics = {s: {m: per_seed[s][m] for m in task.metrics} for s in seeds}
        records[key] = BenchRecord(key, metrics, cost)
    return BenchTable(task, records)


def query(table: BenchTable, key) -> dict[str, float]:
    """Seed-averaged metrics for a key or band tuple."""
    return table.record(key).mean()


def sort_best_first(values: Mapping[BandCombination, float], higher_is_better: bool) -> list[BandCombination]:
    """Band combinations ordered best first; ties go to the lexicographically smaller one."""
    sign = -1.0 if higher_is_better else 1.0
    return sorted(values, key=lambda bc: (sign * values[bc], bc))


def oracle(table: BenchTable, metric: str | None = None) -> tuple[BandCombination, float]:
    metric = metric or table.task.primary_metric
    if not len(table):
        raise ValueError("empty table has no oracle")
    values = table.values(metric)
    best = sort_best_first(values, table.task.higher_is_better(metric))[0]
    return best, values[best]


def regret(table: BenchTable, bc: Sequence[int], metric: str | None = None) -> float:
    metric = metric or table.task.primary_metric
    value = query(table, tuple(bc))[metric]
    _, best = oracle(table, metric)
    gap = best - value if table.task.higher_is_better(metric) else value - best
    if math.isnan(gap):
        # both infinite (perfect reconstruction) counts as optimal
        return 0.0
    return max(gap, 0.0)


def _space_list(space) -> list[BandCombination]:
    if hasattr(space, "candidates_list"):
        return space.candidates_list()
    return [tuple(bc) for bc in space]


def predict_and_expand(
    evaluator,
    space,
    n0: int,
    budget: int,
    surrogate_config=None,
    seed: int = 0,
    cube=None,
    eval_seed: int = 0,
) -> list[BandCombination]:
    """Random initial set of ``n0`` plus the ``budget - n0`` best-predicted remaining BCs.

    The surrogate is fitted on the evaluator's primary metric over the initial set.
    Full-scale values were 5,000 initial and 21,600 total out of C(200, 3).
    """
    from .surrogate import SurrogateConfig, fit_samples, predict_many

    candidates = _space_list(space)
    if not 0 <= n0 <= budget:
        raise ValueError("need 0 <= n0 <= budget")
    if budget > len(candidates):
        raise ValueError(f"budget {budget} exceeds search space size {len(candidates)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(candidates))
    initial = [candidates[i] for i in order[:n0]]
    rest = [candidates[i] for i in order[n0:]]
    n_expand = budget - n0
    if n_expand == 0:
        return initial
    if n_expand == len(rest):
        return initial + rest
    task = evaluator.task
    metric = task.primary_metric
    n_bands = _num_bands(space, candidates)
    samples = [(bc, evaluator(bc, eval_seed)[metric]) for bc in initial]
    samples = [(bc, _finite(v)) for bc, v in samples]
    model = fit_samples(samples, n_bands, surrogate_config or SurrogateConfig(), cube=cube, seed=seed)
    preds = predict_many(model, rest, n_bands, cube=cube)
    sign = -1.0 if task.higher_is_better(metric) else 1.0
    ranked = sorted(range(len(rest)), key=lambda i: (sign * preds[i], rest[i]))
    return initial + [rest[i] for i in ranked[:n_expand]]


def _finite(v: float) -> float:
    # an exact reconstruction has infinite PSNR; cap for regression targets
    return float(np.clip(v, -1e3, 1e3))


def _num_bands(space, candidates) -> int:
    n = getattr(space, "n_bands", None)
    return int(n) if n is not None else max(max(bc) for bc in candidates) + 1


def all_combinations(n: int, k: int) -> list[BandCombination]:
    return [unrank_combination(r, n, k) for r in range(count_combinations(n, k))]


def top_set(table: BenchTable, metric: str, frac: float) -> set[BandCombination]:
    if not 0.0 <= frac <= 1.0:
        raise ValueError("frac must lie in [0, 1]")
    values = table.values(metric)
    ordered = sort_best_first(values, table.task.higher_is_better(metric))
    return set(ordered[: math.floor(frac * len(ordered) + 1e-9)])


def top_overlap(table_a: BenchTable, table_b: BenchTable, metric: str | None = None, frac: float = 0.05) -> float:
    """Jaccard index of the two tables' top-``frac`` band combination sets."""
    metric_a = metric or table_a.task.primary_metric
    metric_b = metric or table_b.task.primary_metric
    if not set(table_a.bands()) & set(table_b.bands()):
        raise ValueError("tables share no band combinations")
    a, b = top_set(table_a, metric_a, frac), top_set(table_b, metric_b, frac)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def rank_correlation(table_a: BenchTable, table_b: BenchTable, metric: str | None = None) -> float:
    """Spearman coefficient of seed-averaged values over identical band sets."""
    metric_a = metric or table_a.task.primary_metric
    metric_b = metric or table_b.task.primary_metric
    va, vb = table_a.values(metric_a), table_b.values(metric_b)
    if set(va) != set(vb):
        diff = sorted(set(va) ^ set(vb))
        raise ValueError(f"tables differ in band combinations: {[format_bc(d) for d in diff]}")
    keys = sorted(va)
    return spearman([va[k] for k in keys], [vb[k] for k in keys])


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) < 2:
        raise ValueError("need at least two values for a rank correlation")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise ValueError("rank correlation undefined for constant values")
    return float(sps.spearmanr(a, b).statistic)


_FIELDS = ("task", "dataset_id", "backbone_id", "bands", "seeds", "cost_seconds")


def save_table(table: BenchTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(table.records):
            rec = table.records[key]
            obj = {
                "task": key.task,
                "dataset_id": key.dataset_id,
                "backbone_id": key.backbone_id,
                "bands": list(key.bands),
                "seeds": {str(s): dict(m) for s, m in sorted(rec.seeds.items())},
                "cost_seconds": rec.cost_seconds,
            }
            fh.write(json.dumps(obj, sort_keys=False) + "\n")


def _parse_line(lineno: int, line: str) -> BenchRecord:
    def fail(msg):
        raise SchemaError(f"line {lineno}: {msg}")

    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        fail(f"invalid JSON ({exc.msg})")
    if not isinstance(obj, dict):
        fail("expected an object")
    unknown = sorted(set(obj) - set(_FIELDS))
    if unknown:
        fail(f"unknown field(s) {unknown}")
    for name in _FIELDS:
        if name not in obj:
            fail(f"missing field {name!r}")
    try:
        task = task_spec(obj["task"])
    except ValueError as exc:
        fail(str(exc))
    bands = obj["bands"]
    if not isinstance(bands, list) or not all(isinstance(b, int) and b >= 0 for b in bands) or not bands:
        fail("field 'bands' must be a non-empty array of non-negative integers")
    if not isinstance(obj["seeds"], dict) or not obj["seeds"]:
        fail("field 'seeds' must be a non-empty object")
    seeds = {}
    for s, metrics in obj["seeds"].items():
        try:
            seed = int(s)
        except ValueError:
            fail(f"seed key {s!r} is not an integer")
        if not isinstance(metrics, dict):
            fail(f"seeds.{s} must be an object")
        for m in task.metrics:
            if m not in metrics:
                fail(f"missing metric field seeds.{s}.{m}")
        extra = sorted(set(metrics) - set(task.metrics))
        if extra:
            fail(f"unknown metric field(s) seeds.{s}.{extra}")
        seeds[seed] = {m: float(metrics[m]) for m in task.metrics}
    if not isinstance(obj["cost_seconds"], (int, float)):
        fail("field 'cost_seconds' must be a number")
    try:
        key = BenchKey(task.kind, str(obj["dataset_id"]), str(obj["backbone_id"]), tuple(bands))
    except ValueError as exc:
        fail(str(exc))
    return BenchRecord(key, seeds, float(obj["cost_seconds"]))


def load_table(path) -> BenchTable:
    records: dict[BenchKey, BenchRecord] = {}
    task = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = _parse_line(lineno, line)
            if task is None:
                task = task_spec(rec.key.task)
            elif rec.key.task != task.kind:
                raise SchemaError(f"line {lineno}: task {rec.key.task!r} differs from {task.kind!r}")
            if rec.key in records:
                raise SchemaError(f"line {lineno}: duplicate record for bands {format_bc(rec.key.bands)}")
            records[rec.key] = rec
    if task is None:
        raise SchemaError(f"{path}: empty table file")
    return BenchTable(task, records)

