"""Band-selection search over an evaluator: argbest of a validation metric over a space.

Every algorithm memoizes evaluator calls within a run, so ``evaluations`` counts
unique band combinations and the trace lists each one once, in first-visit order.
Ties are always broken towards the lexicographically smaller band tuple.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from .hsi import BandCombination, count_combinations, format_bc, unrank_combination
from .stats import BandStats

DEFAULT_CAP = 200_000
PERMUTE_LIMIT = 1_000_000


@dataclass(frozen=True)
class SearchSpace:
    n_bands: int
    k: int
    candidates: tuple[BandCombination, ...] | None = None

    def __post_init__(self):
        if not 1 <= self.k <= self.n_bands:
            raise ValueError(f"need 1 <= k <= n_bands, got k={self.k}, n_bands={self.n_bands}")
        if self.candidates is not None:
            cands = tuple(tuple(int(b) for b in c) for c in self.candidates)
            if not cands:
                raise ValueError("explicit candidate list is empty")
            if len(set(cands)) != len(cands):
                raise ValueError("explicit candidate list has duplicates")
            for c in cands:
                if len(c) != self.k or list(c) != sorted(set(c)) or c[-1] >= self.n_bands:
                    raise ValueError(f"candidate {c} is not a valid {self.k}-band combination")
            object.__setattr__(self, "candidates", cands)

    @property
    def size(self) -> int:
        if self.candidates is not None:
            return len(self.candidates)
        return count_combinations(self.n_bands, self.k)

    def __getitem__(self, i: int) -> BandCombination:
        if self.candidates is not None:
            return self.candidates[i]
        return unrank_combination(int(i), self.n_bands, self.k)

    def __contains__(self, bc) -> bool:
        bc = tuple(bc)
        if self.candidates is not None:
            return bc in self._candidate_set()
        return len(bc) == self.k and list(bc) == sorted(set(bc)) and 0 <= bc[0] and bc[-1] < self.n_bands

    def _candidate_set(self):
        cache = self.__dict__.get("_cset")
        if cache is None:
            cache = frozenset(self.candidates)
            object.__setattr__(self, "_cset", cache)
        return cache

    def __iter__(self):
        if self.candidates is not None:
            return iter(self.candidates)
        return itertools.combinations(range(self.n_bands), self.k)

    def candidates_list(self) -> list[BandCombination]:
        return list(self)

    def sample(self, m: int, rng: np.random.Generator) -> list[BandCombination]:
        """``m`` distinct uniform draws; the draws for ``m`` are a prefix of those for ``m + 1``."""
        size = self.size
        m = min(m, size)
        if size <= PERMUTE_LIMIT:
            return [self[int(i)] for i in rng.permutation(size)[:m]]
        seen: set[int] = set()
        out = []
        while len(out) < m:
            r = int(rng.integers(size))
            if r not in seen:
                seen.add(r)
                out.append(self[r])
        return out


@dataclass
class SearchResult:
    algorithm: str
    bands: BandCombination
    score: float
    evaluations: int
    seconds: float
    trace: list[tuple[BandCombination, float]] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int | None = None
    metric: str = ""

    def to_dict(self, trace_path: str | None = None) -> dict:
        return {
            "algorithm": self.algorithm,
            "config": self.config,
            "seed": self.seed,
            "metric": self.metric,
            "bands": list(self.bands),
            "score": self.score,
            "evaluations": self.evaluations,
            "trace": trace_path,
        }


def write_result(result: SearchResult, path, trace_path=None) -> None:
    """Result JSON plus a ``bands,score`` trace CSV next to it."""
    trace_path = str(trace_path or f"{path}.trace.csv")
    with open(trace_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bands", "score"])
        for bc, score in result.trace:
            w.writerow([format_bc(bc), repr(score)])
    with open(path, "w") as fh:
        json.dump(result.to_dict(trace_path), fh, indent=2)
        fh.write("\n")


def read_result(path) -> dict:
    with open(path) as fh:
        obj = json.load(fh)
    obj["bands"] = tuple(obj["bands"])
    return obj


class Objective:
    """Memoized ``bc -> metric`` wrapper that records the trace and the running best."""

    def __init__(self, evaluator, metric: str | None = None, eval_seed: int = 0, budget: int | None = None):
        self.evaluator = evaluator
        self.metric = metric or evaluator.task.primary_metric
        self.higher = evaluator.task.higher_is_better(self.metric)
        self.eval_seed = eval_seed
        self.budget = budget
        self.cache: dict[BandCombination, float] = {}
        self.trace: list[tuple[BandCombination, float]] = []

    def __call__(self, bc: Sequence[int]) -> float:
        bc = tuple(int(b) for b in bc)
        if bc not in self.cache:
            if self.budget is not None and len(self.cache) >= self.budget:
                raise RuntimeError(f"evaluation budget {self.budget} exhausted")
            value = float(self.evaluator(bc, self.eval_seed)[self.metric])
            self.cache[bc] = value
            self.trace.append((bc, value))
        return self.cache[bc]

    def key(self, bc: BandCombination, value: float):
        """Sort key: smaller is better."""
        return ((-value if self.higher else value), bc)

    def best(self) -> tuple[BandCombination, float]:
        if not self.trace:
            raise ValueError("nothing evaluated")
        bc = min(self.cache, key=lambda c: self.key(c, self.cache[c]))
        return bc, self.cache[bc]

    def result(self, algorithm: str, start: float, config: dict, seed=None) -> SearchResult:
        bc, score = self.best()
        return SearchResult(
            algorithm, bc, score, len(self.trace), time.perf_counter() - start,
            list(self.trace), config, seed, self.metric,
        )


def _as_space(space) -> SearchSpace:
    if isinstance(space, SearchSpace):
        return space
    cands = [tuple(c) for c in space]
    return SearchSpace(max(max(c) for c in cands) + 1, len(cands[0]), tuple(cands))


def exhaustive(evaluator, space, metric: str | None = None, cap: int = DEFAULT_CAP, eval_seed: int = 0) -> SearchResult:
    space = _as_space(space)
    if space.size > cap:
        raise ValueError(f"search space of {space.size} combinations exceeds the exhaustive cap {cap}")
    start = time.perf_counter()
    obj = Objective(evaluator, metric, eval_seed)
    for bc in space:
        obj(bc)
    return obj.result("exhaustive", start, {"cap": cap})


def random_search(evaluator, space, m: int, metric: str | None = None, seed: int = 0, eval_seed: int = 0) -> SearchResult:
    if m < 1:
        raise ValueError("M must be at least 1")
    space = _as_space(space)
    start = time.perf_counter()
    obj = Objective(evaluator, metric, eval_seed)
    for bc in space.sample(m, np.random.default_rng(seed)):
        obj(bc)
    return obj.result("random", start, {"M": m}, seed)


def sffs(
    evaluator,
    space,
    metric: str | None = None,
    n_completions: int | None = 8,
    seed: int = 0,
    eval_seed: int = 0,
    max_steps: int = 1000,
) -> SearchResult:
    """Sequential floating forward selection.

    A partial subset of size k < K is scored by the mean metric over
    ``n_completions`` random completions to size K, drawn from a generator
    keyed on ``(seed, subset)`` so each partial subset has one fixed score.
    When fewer completions exist than requested, or ``n_completions`` is None,
    all of them are used. Only the all-completions mean is guaranteed to rank
    partial subsets correctly for an additive objective; the sampled mean is
    an approximation that needs far fewer evaluations.
    """
    space = _as_space(space)
    n, k_target = space.n_bands, space.k
    start = time.perf_counter()
    obj = Objective(evaluator, metric, eval_seed)
    sign = 1.0 if obj.higher else -1.0
    partial: dict[BandCombination, float] = {}

    def score(subset: BandCombination) -> float:
        if len(subset) == k_target:
            return obj(subset)
        if subset not in partial:
            others = [b for b in range(n) if b not in subset]
            need = k_target - len(subset)
            if n_completions is None or math.comb(len(others), need) <= n_completions:
                pads = list(itertools.combinations(others, need))
            else:
                rng = np.random.default_rng([seed, *subset])
                pads = [tuple(rng.choice(others, need, replace=False)) for _ in range(n_completions)]
            partial[subset] = float(np.mean([obj(tuple(sorted(subset + p))) for p in pads]))
        return partial[subset]

    def pick(options: list[BandCombination]) -> tuple[BandCombination, float]:
        scored = [(c, score(c)) for c in options]
        return min(scored, key=lambda cv: (-sign * cv[1], cv[0]))

    best_at: dict[int, float] = {}
    current: BandCombination = ()
    steps = 0
    while len(current) < k_target and steps < max_steps:
        steps += 1
        current, value = pick([tuple(sorted(current + (b,))) for b in range(n) if b not in current])
        size = len(current)
        if size not in best_at or sign * value > sign * best_at[size]:
            best_at[size] = value
        if size == k_target:
            break
        # conditional exclusion: drop a band only if that beats every subset seen at the smaller size
        while len(current) > 2 and steps < max_steps:
            steps += 1
            reduced, value = pick([tuple(c for c in current if c != b) for b in current])
            if sign * value <= sign * best_at[len(reduced)]:
                break
            current = reduced
            best_at[len(current)] = value
    if len(current) == k_target:
        obj(current)
    return obj.result("sffs", start, {"n_completions": n_completions}, seed)


@dataclass(frozen=True)
class GAConfig:
    population: int = 20
    generations: int = 20
    tournament: int = 3
    mutation_rate: float = 0.2

    def validate(self) -> None:
        if self.population < 2:
            raise ValueError("population must be at least 2")
        if self.generations < 0:
            raise ValueError("generations must be non-negative")
        if self.tournament < 1:
            raise ValueError("tournament size must be at least 1")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError("mutation rate must lie in [0, 1]")


def genetic(
    evaluator,
    space,
    config: GAConfig = GAConfig(),
    metric: str | None = None,
    seed: int = 0,
    eval_seed: int = 0,
    initial: Sequence[Sequence[int]] | None = None,
) -> SearchResult:
    """Generational GA over band sets with tournament selection and elitism of one.

    Crossover draws K bands without replacement from the union of both parents;
    mutation swaps one band for a uniformly chosen band outside the child.
    """
    config.validate()
    space = _as_space(space)
    n, k = space.n_bands, space.k
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    obj = Objective(evaluator, metric, eval_seed)
    if initial is not None:
        pop = [tuple(sorted(int(b) for b in c)) for c in initial]
        if len(pop) != config.population:
            raise ValueError("initial population size does not match config")
    else:
        pop = space.sample(config.population, rng)
        while len(pop) < config.population:
            pop.append(pop[len(pop) % len(pop)])
    for c in pop:
        obj(c)

    def tournament() -> BandCombination:
        picks = rng.integers(len(pop), size=config.tournament)
        return min((pop[i] for i in picks), key=lambda c: obj.key(c, obj.cache[c]))

    def child_of(a, b) -> BandCombination:
        union = sorted(set(a) | set(b))
        child = set(int(x) for x in rng.choice(union, k, replace=False))
        if rng.random() < config.mutation_rate and k < n:
            outside = [x for x in range(n) if x not in child]
            child.remove(int(rng.choice(sorted(child))))
            child.add(int(rng.choice(outside)))
        return tuple(sorted(child))

    for _ in range(config.generations):
        elite = min(pop, key=lambda c: obj.key(c, obj.cache[c]))
        nxt = [elite]
        while len(nxt) < config.population:
            a, b = tournament(), tournament()
            child = child_of(a, b)
            tries = 0
            while child not in space and tries < 20:
                child = child_of(a, b)
                tries += 1
            if child not in space:
                child = space.sample(1, rng)[0]
            nxt.append(child)
        pop = nxt
        for c in pop:
            obj(c)
    cfg = asdict(config)
    return obj.result("ga", start, cfg, seed)


@dataclass(frozen=True)
class PredictorConfig:
    n_train: int = 100
    n_rank: int = 1000
    top_t: int = 20


def predictor_search(
    evaluator,
    space,
    config: PredictorConfig = PredictorConfig(),
    metric: str | None = None,
    seed: int = 0,
    eval_seed: int = 0,
    surrogate_config=None,
    cube=None,
    predictor: Callable[[BandCombination], float] | None = None,
) -> SearchResult:
    """Evaluate a random training sample, fit a surrogate, truly evaluate its top picks.

    ``predictor`` replaces the fitted surrogate when given (e.g. a perfect one).
    """
    from .surrogate import SurrogateConfig, fit_samples, predict_many

    space = _as_space(space)
    if config.n_train < 1 and predictor is None:
        raise ValueError("n_train must be positive")
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    obj = Objective(evaluator, metric, eval_seed)
    drawn = space.sample(config.n_train + config.n_rank, rng)
    train, pool = drawn[: config.n_train], drawn[config.n_train :]
    for bc in train:
        obj(bc)
    if config.top_t > 0 and pool:
        if predictor is None:
            model = fit_samples(
                [(bc, float(np.clip(obj.cache[bc], -1e3, 1e3))) for bc in train],
                space.n_bands, surrogate_config or SurrogateConfig(), cube=cube, seed=seed,
            )
            preds = predict_many(model, pool, space.n_bands, cube=cube)
        else:
            preds = np.array([predictor(bc) for bc in pool])
        sign = -1.0 if obj.higher else 1.0
        ranked = sorted(range(len(pool)), key=lambda i: (sign * preds[i], pool[i]))
        for i in ranked[: config.top_t]:
            obj(pool[i])
    return obj.result("predictor", start, asdict(config), seed)


def stats_ranked_search(
    evaluator,
    cube,
    space,
    m: int,
    metric: str | None = None,
    alpha: float = 0.5,
    eval_seed: int = 0,
) -> SearchResult:
    """Rank by a blend of min-max normalized BC entropy and BC SAM; evaluate the top ``m``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    space = _as_space(space)
    start = time.perf_counter()
    stats = BandStats.of(cube)
    cands = space.candidates_list()
    ent = np.array([stats.bc_entropy(c) for c in cands])
    ang = np.array([stats.bc_sam(c) if len(c) > 1 else 0.0 for c in cands])

    def norm(v):
        span = v.max() - v.min()
        return (v - v.min()) / span if span > 0 else np.zeros_like(v)

    blend = alpha * norm(ent) + (1 - alpha) * norm(ang)
    order = sorted(range(len(cands)), key=lambda i: (-blend[i], cands[i]))
    obj = Objective(evaluator, metric, eval_seed)
    for i in order[:m]:
        obj(cands[i])
    return obj.result("stats", start, {"M": m, "alpha": alpha})


ALGORITHMS = ("exhaustive", "random", "sffs", "ga", "predictor", "stats")
