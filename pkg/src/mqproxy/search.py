"""Evolutionary proxy search with diversity-prompting selection and screening."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import dsl, metrics
from .bench import Benchmark

STREAMS = ("init", "selection", "crossover", "mutation", "dps", "fitness")
REJECT_REASONS = ("conflict", "invalid_score", "insensitive", "duplicate")
HISTORY_FIELDS = ("generation", "best_fitness", "mean_fitness", "population_size", "sampled_count",
                  "evaluated_count", "rejected_conflict", "rejected_invalid", "rejected_insensitive",
                  "rejected_duplicate")


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    population_size: int = 20
    iterations: int = 1000
    selection_ratio: float = 0.25
    p_crossover: float = 0.5
    p_mutation: float = 0.5
    n_eval_cfgs: int = 50
    topk_fractions: tuple[float, ...] = (0.2, 0.5, 1.0)
    seed: int = 0
    structure: str = "branched"
    osp: bool = True
    screening: bool = True
    dps: bool = True
    max_evaluations: int | None = None
    max_candidates: int | None = None

    def __post_init__(self):
        if not 0.0 < self.selection_ratio <= 1.0:
            raise ValueError("selection ratio must lie in (0, 1]")
        for p in (self.p_crossover, self.p_mutation):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.population_size < 2:
            raise ValueError("population needs at least two individuals")
        if self.structure not in dsl.STRUCTURES:
            raise ValueError(f"unknown structure {self.structure!r}")


@dataclass
class Individual:
    genome: dsl.Genome
    fitness: float
    born: int = 0


def streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}


def topk_fitness(gt: np.ndarray, est: np.ndarray, fractions: Sequence[float] = (0.2, 0.5, 1.0)) -> float:
    return metrics.topk_mean(gt, est, fractions)


@dataclass
class Evaluator:
    """Screens candidates and scores survivors on a fixed sample of configs.

    ``sampled`` counts every candidate offered, ``evaluated`` those that
    reached fitness computation.
    """

    bench: Benchmark
    stats: list
    indices: list
    fractions: tuple = (0.2, 0.5, 1.0)
    screening: bool = True
    sampled: int = 0
    evaluated: int = 0
    rejected: Counter = field(default_factory=Counter)

    def __post_init__(self):
        self.gt = self.bench.accuracies(self.indices)
        self.cfgs = np.asarray(self.bench.configs(self.indices), dtype=np.float64)
        on = self.screening
        self.screener = dsl.Screener(list(self.stats), conflicts=on, invalid=on, sensitivity=on, duplicates=on)

    @classmethod
    def for_search(cls, bench: Benchmark, stats, n_cfgs: int, rng: np.random.Generator,
                   fractions=(0.2, 0.5, 1.0), screening: bool = True) -> "Evaluator":
        val, _ = bench.split()
        if n_cfgs > len(val):
            raise ValueError(f"{n_cfgs} fitness configs requested, validation split has {len(val)}")
        idx = sorted(int(i) for i in rng.choice(val, size=n_cfgs, replace=False))
        return cls(bench, list(stats), idx, tuple(fractions), screening)

    def fitness_of_scores(self, scores) -> float:
        if isinstance(scores, dsl.Invalid):
            return -math.inf
        est = self.cfgs @ scores
        if not np.all(np.isfinite(est)):
            return -math.inf
        return topk_fitness(self.gt, est, self.fractions)

    def offer(self, g: dsl.Genome) -> float | None:
        """Fitness of ``g``, or None when screening rejects it or it cannot be scored."""
        self.sampled += 1
        report, scores = self.screener.screen(g)
        if not report.passed:
            self.rejected[report.reason] += 1
            return None
        self.evaluated += 1
        f = self.fitness_of_scores(scores)
        return None if f == -math.inf else f


def fitness_on(g: dsl.Genome, bench: Benchmark, stats, indices, fractions=(0.2, 0.5, 1.0)) -> float:
    return Evaluator(bench, list(stats), list(indices), tuple(fractions), screening=False).fitness_of_scores(
        dsl.layer_scores(g, stats))


def holdout_fitness(g: dsl.Genome, bench: Benchmark, stats, fractions=(0.2, 0.5, 1.0)) -> float:
    """Fitness on the whole test split."""
    return fitness_on(g, bench, stats, bench.split()[1], fractions)


# variation -----------------------------------------------------------------

def tournament_select(population: Sequence[Individual], r: float, rng: np.random.Generator,
                      k: int | None = None) -> tuple[Individual, Individual]:
    """Two parents drawn uniformly from the top ``k`` of a random pool of ceil(r * |P|)."""
    if len(population) < 2:
        raise SearchError("tournament needs at least two individuals")
    size = max(2, math.ceil(r * len(population)))
    pool = [population[i] for i in rng.choice(len(population), size=size, replace=False)]
    pool.sort(key=lambda ind: -ind.fitness)
    top = pool[:k or len(pool)]
    i, j = rng.choice(len(top), size=2, replace=len(top) < 2)
    return top[i], top[j]


def crossover(a: dsl.Genome, b: dsl.Genome, p_c: float, rng: np.random.Generator) -> dsl.Genome:
    if a.structure != b.structure:
        raise SearchError(f"cannot cross {a.structure} with {b.structure}")
    if rng.random() >= p_c:
        return a
    if a.structure == "sequential":
        cut = int(rng.integers(1, dsl.SEQ_DEPTH))
        return replace(a, unary=(a.unary[0][:cut] + b.unary[0][cut:],))
    if a.structure == "branched":
        mine, theirs = rng.integers(0, 2, size=2)
        inputs, unary = list(a.inputs), list(a.unary)
        inputs[mine], unary[mine] = b.inputs[theirs], b.unary[theirs]
        return replace(a, inputs=tuple(inputs), unary=tuple(unary))
    mask = rng.random(dsl.DAG_NODES) < 0.5
    unary = tuple(bu if m else au for m, au, bu in zip(mask, a.unary, b.unary))
    binary = tuple(bb if m else ab for m, ab, bb in zip(mask, a.binary, b.binary))
    return replace(a, unary=unary, binary=binary)


def mutation_slots(g: dsl.Genome) -> list[tuple[str, int, int]]:
    slots = [("input", i, 0) for i in range(len(g.inputs))]
    slots += [("unary", c, k) for c, chain in enumerate(g.unary) for k in range(len(chain))]
    slots += [("binary", i, 0) for i in range(len(g.binary))]
    return slots


def mutate(g: dsl.Genome, p_m: float, rng: np.random.Generator, osp: bool = True) -> dsl.Genome:
    """With probability ``p_m`` resample one slot (input, unary or binary op)."""
    if rng.random() >= p_m:
        return g
    slots = mutation_slots(g)
    kind, i, k = slots[int(rng.integers(len(slots)))]
    if kind == "input":
        inputs = list(g.inputs)
        inputs[i] = dsl.sample_input(rng)
        return replace(g, inputs=tuple(inputs))
    if kind == "binary":
        binary = list(g.binary)
        binary[i] = dsl.sample_binary(rng, osp)
        return replace(g, binary=tuple(binary))
    chain = list(g.unary[i])
    chain[k] = dsl.sample_unary(rng, osp)
    unary = list(g.unary)
    unary[i] = tuple(chain)
    return replace(g, unary=tuple(unary))


# search loops --------------------------------------------------------------

@dataclass
class SearchResult:
    best: Individual
    population: list
    history: list
    evaluator: Evaluator
    offspring_log: list = field(default_factory=list)

    @property
    def counters(self) -> dict:
        ev = self.evaluator
        return {"sampled": ev.sampled, "evaluated": ev.evaluated, **{r: ev.rejected[r] for r in REJECT_REASONS}}


def _exhausted(cfg: SearchConfig, ev: Evaluator) -> bool:
    if cfg.max_evaluations is not None and ev.evaluated >= cfg.max_evaluations:
        return True
    return cfg.max_candidates is not None and ev.sampled >= cfg.max_candidates


def _history_row(gen: int, pop: list, ev: Evaluator) -> dict:
    fits = [ind.fitness for ind in pop]
    return {
        "generation": gen,
        "best_fitness": max(fits),
        "mean_fitness": float(np.mean(fits)),
        "population_size": len(pop),
        "sampled_count": ev.sampled,
        "evaluated_count": ev.evaluated,
        "rejected_conflict": ev.rejected["conflict"],
        "rejected_invalid": ev.rejected["invalid_score"],
        "rejected_insensitive": ev.rejected["insensitive"],
        "rejected_duplicate": ev.rejected["duplicate"],
    }


def evolve(cfg: SearchConfig, bench: Benchmark, stats, max_init_attempts: int = 100_000,
           max_retries: int = 10_000) -> SearchResult:
    rng = streams(cfg.seed)
    ev = Evaluator.for_search(bench, stats, cfg.n_eval_cfgs, rng["fitness"], cfg.topk_fractions, cfg.screening)
    born = 0
    pop: list[Individual] = []
    for _ in range(max_init_attempts):
        if len(pop) == cfg.population_size:
            break
        g = dsl.sample_genome(cfg.structure, rng["init"], cfg.osp)
        f = ev.offer(g)
        if f is not None:
            pop.append(Individual(g, f, born))
            born += 1
    if len(pop) < cfg.population_size:
        raise SearchError(f"only {len(pop)} valid proxies after {max_init_attempts} samples")

    history = [_history_row(0, pop, ev)]
    log = []
    for gen in range(1, cfg.iterations + 1):
        if _exhausted(cfg, ev):
            break
        offspring = None
        for _ in range(max_retries):
            if _exhausted(cfg, ev):
                break
            p1, p2 = tournament_select(pop, cfg.selection_ratio, rng["selection"])
            child = crossover(p1.genome, p2.genome, cfg.p_crossover, rng["crossover"])
            mutant = mutate(child, cfg.p_mutation, rng["mutation"], cfg.osp)
            f_m = ev.offer(mutant)
            f_r, rand = None, None
            if cfg.dps and not _exhausted(cfg, ev):
                rand = dsl.sample_genome(cfg.structure, rng["dps"], cfg.osp)
                f_r = ev.offer(rand)
            if f_m is None and f_r is None:
                continue
            # the mutant wins ties
            if f_r is None or (f_m is not None and f_r <= f_m):
                offspring = Individual(mutant, f_m, born)
            else:
                offspring = Individual(rand, f_r, born)
            born += 1
            log.append({"generation": gen, "mutant_fitness": f_m, "random_fitness": f_r,
                        "offspring_fitness": offspring.fitness})
            break
        if offspring is None:
            break
        pop.append(offspring)
        worst = min(range(len(pop)), key=lambda i: (pop[i].fitness, pop[i].born))
        pop.pop(worst)
        history.append(_history_row(gen, pop, ev))
    best = max(pop, key=lambda ind: (ind.fitness, -ind.born))
    return SearchResult(best, pop, history, ev, log)


def random_search(budget: int, bench: Benchmark, stats, seed: int = 0, structure: str = "branched",
                  osp: bool = True, n_eval_cfgs: int = 50, fractions=(0.2, 0.5, 1.0),
                  max_candidates: int = 1_000_000) -> SearchResult:
    """Best of random valid proxies after ``budget`` full evaluations."""
    if budget < 1:
        raise ValueError("budget must be at least one evaluation")
    rng = streams(seed)
    ev = Evaluator.for_search(bench, stats, n_eval_cfgs, rng["fitness"], tuple(fractions))
    found: list[Individual] = []
    history = []
    while ev.evaluated < budget and ev.sampled < max_candidates:
        g = dsl.sample_genome(structure, rng["init"], osp)
        f = ev.offer(g)
        if f is not None:
            found.append(Individual(g, f, len(found)))
            history.append(_history_row(len(found), found, ev))
    if not found:
        raise SearchError("random search found no valid proxy")
    best = max(found, key=lambda ind: (ind.fitness, -ind.born))
    return SearchResult(best, found, history, ev)


def history_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items() if k in HISTORY_FIELDS})
    return buf.getvalue()
