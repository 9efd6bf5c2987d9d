"""Real-valued genetic algorithm over genomes in [0, 1]^n.

The engine minimises an arbitrary batch fitness function ``fit(genomes) ->
values`` where ``genomes`` is a ``(k, n)`` array. Fitness must be pure: the
engine may split a generation into chunks and evaluate them on worker
threads, writing results back by index.

Random draws come from a single ``numpy.random.Generator`` in a fixed order:

1. initialisation: ``uniform(-eps, eps, (N, n))``
2. per generation:
   a. tournament entrants ``integers(0, N, (2P, k))`` for P parent pairs
   b. crossover coins ``random(P)``, then swap masks ``random((P_x, n))``
      for the P_x pairs that cross
   c. mutation coins ``random(C)`` for the C = N - 1 children, then
      ``normal(mean, sigma, (C_m, n))`` and zero-pixel gates
      ``random((C_m, n))`` for the C_m children that mutate

Fitness evaluation never touches the generator.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np


@dataclass
class GAParams:
    population_size: int = 100
    generations: int = 200
    crossover_prob: float = 0.5
    swap_prob: float = 0.5
    mutation_prob: float = 0.05
    gaussian_mean: float = 0.0  # byte scale, divided by 255
    gaussian_sigma: float = 30.0  # byte scale, divided by 255
    init_epsilon: float = 1.0 / 255.0
    tournament_size: int = 3
    step_cap: float = 3.0  # noise truncated to step_cap * sigma
    zero_mutation_factor: float = 0.1
    seed: int = 0
    workers: int = 1
    eval_batch: int = 100

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be at least 2")
        if self.generations < 0:
            raise ValueError("generations must be non-negative")
        for name in ("crossover_prob", "swap_prob", "mutation_prob", "zero_mutation_factor"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.gaussian_sigma < 0 or self.init_epsilon < 0 or self.step_cap < 0:
            raise ValueError("gaussian_sigma, init_epsilon and step_cap must be non-negative")
        if not 1 <= self.tournament_size <= self.population_size:
            raise ValueError("tournament_size must lie in [1, population_size]")
        if self.workers < 1 or self.eval_batch < 1:
            raise ValueError("workers and eval_batch must be positive")

    @property
    def sigma(self) -> float:
        return self.gaussian_sigma / 255.0

    @property
    def mean(self) -> float:
        return self.gaussian_mean / 255.0


@dataclass
class Individual:
    genome: np.ndarray
    fitness: float | None = None


@dataclass
class Population:
    genomes: np.ndarray  # (N, n)
    fitness: np.ndarray  # (N,), NaN where unevaluated
    elite: Individual | None = None
    generation: int = 0
    evaluations: int = 0

    def __len__(self):
        return len(self.genomes)

    def individuals(self) -> list[Individual]:
        return [Individual(g.copy(), None if np.isnan(f) else float(f))
                for g, f in zip(self.genomes, self.fitness)]


@dataclass
class StoppingRule:
    """Optional early stop: best fitness improved by less than ``tolerance``
    over the last ``window`` generations and is already below ``threshold``.

    ``threshold`` also marks trend rows whose best fitness is below it
    (for the attack: the loss term is zero).
    """
    early_stop: bool = False
    window: int = 30
    tolerance: float = 1e-6
    threshold: float = math.inf

    def should_stop(self, best: list[float]) -> bool:
        if not self.early_stop or len(best) <= self.window:
            return False
        return best[-1 - self.window] - best[-1] < self.tolerance and best[-1] < self.threshold


@dataclass
class TrendLog:
    best_fitness: list[float] = field(default_factory=list)
    loss_term_zero: list[bool] = field(default_factory=list)
    evaluations: int = 0

    def __len__(self):
        return len(self.best_fitness)

    def append(self, best: float, threshold: float):
        self.best_fitness.append(float(best))
        self.loss_term_zero.append(bool(best < threshold))

    def rows(self):
        for g, (f, z) in enumerate(zip(self.best_fitness, self.loss_term_zero), start=1):
            yield {"generation": g, "best_fitness": repr(f), "loss_term_zero": str(z).lower()}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["generation", "best_fitness", "loss_term_zero"])
            writer.writeheader()
            writer.writerows(self.rows())


# -- operators ------------------------------------------------------------------

def init_population(x, params: GAParams, rng) -> Population:
    """Every gene starts at ``clamp(x_i + u, 0, 1)`` with ``u ~ U(-eps, eps)``."""
    x = np.asarray(x, dtype=np.float64)
    noise = rng.uniform(-params.init_epsilon, params.init_epsilon, size=(params.population_size, x.size))
    genomes = np.clip(x[None, :] + noise, 0.0, 1.0)
    return Population(genomes, np.full(params.population_size, np.nan))


def _tournament(fitness, k, count, rng) -> np.ndarray:
    if np.isnan(fitness).any():
        raise RuntimeError("tournament over an unevaluated individual")
    entrants = rng.integers(0, len(fitness), size=(count, k))
    # argmin keeps the first-drawn entrant among equal fitness values
    return entrants[np.arange(count), fitness[entrants].argmin(axis=1)]


def tournament_select(pop: Population, k: int, rng) -> Individual:
    """Draw ``k`` entrants with replacement and return the fittest (lowest value)."""
    i = _tournament(pop.fitness, k, 1, rng)[0]
    return Individual(pop.genomes[i].copy(), float(pop.fitness[i]))


def _crossover(a, b, p_swap, rng):
    swap = rng.random(a.shape) < p_swap
    return np.where(swap, b, a), np.where(swap, a, b)


def uniform_crossover(a: Individual, b: Individual, p_swap: float, rng):
    """Exchange each gene independently with probability ``p_swap``."""
    if a.genome.shape != b.genome.shape:
        raise ValueError("parents differ in genome length")
    c, d = _crossover(a.genome, b.genome, p_swap, rng)
    return Individual(c), Individual(d)


def _mutate(genomes, origin, params: GAParams, rng):
    """Mutate rows in place-free fashion; returns (new genomes, mutated mask)."""
    mutate = rng.random(len(genomes)) < params.mutation_prob
    out = genomes.copy()
    rows = np.flatnonzero(mutate)
    if rows.size:
        cap = params.step_cap * params.sigma
        noise = np.clip(rng.normal(params.mean, params.sigma, size=(rows.size, genomes.shape[1])), -cap, cap)
        gate = (origin != 0.0)[None, :] | (rng.random((rows.size, genomes.shape[1])) < params.zero_mutation_factor)
        out[rows] = np.clip(genomes[rows] + noise * gate, 0.0, 1.0)
    return out, mutate


def gaussian_mutate(ind: Individual, origin, params: GAParams, rng) -> Individual:
    """With probability ``mutation_prob`` add truncated Gaussian noise to every gene.

    Genes whose origin pixel is exactly 0 only take the noise with
    probability ``zero_mutation_factor``.
    """
    origin = np.asarray(origin, dtype=np.float64)
    if origin.shape != ind.genome.shape:
        raise ValueError("genome and origin differ in length")
    out, mutated = _mutate(ind.genome[None, :], origin, params, rng)
    return Individual(out[0], None if mutated[0] else ind.fitness)


# -- evaluation and the generation loop ------------------------------------------

def evaluate(pop: Population, fit, params: GAParams) -> int:
    """Fill in missing fitness values and refresh the elite. Returns the number evaluated."""
    pending = np.flatnonzero(np.isnan(pop.fitness))
    if pending.size:
        chunks = [pending[i:i + params.eval_batch] for i in range(0, pending.size, params.eval_batch)]
        call = lambda idx: np.asarray(fit(pop.genomes[idx]), dtype=np.float64)
        if params.workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(params.workers) as pool:
                values = list(pool.map(call, chunks))
        else:
            values = [call(idx) for idx in chunks]
        for idx, v in zip(chunks, values):
            if v.shape != idx.shape:
                raise ValueError(f"fitness returned shape {v.shape} for {idx.size} genomes")
            pop.fitness[idx] = v
        pop.evaluations += int(pending.size)
    best = int(np.argmin(pop.fitness))
    if pop.elite is None or pop.fitness[best] < pop.elite.fitness:
        pop.elite = Individual(pop.genomes[best].copy(), float(pop.fitness[best]))
    return int(pending.size)


def step(pop: Population, fit, params: GAParams, rng, origin=None) -> Population:
    """Advance one generation; the returned population is fully evaluated.

    The elite is copied into slot 0; the other N - 1 slots are children bred by
    tournament selection, pairwise uniform crossover (applied with
    probability ``crossover_prob``) and Gaussian mutation. Children that were
    neither crossed nor mutated keep their parent's cached fitness.
    ``origin`` is the reference image for zero-pixel preservation; it
    defaults to the elite genome.
    """
    evaluate(pop, fit, params)
    origin = pop.elite.genome if origin is None else np.asarray(origin, dtype=np.float64)
    n_children = len(pop) - 1
    pairs = (n_children + 1) // 2

    parents = _tournament(pop.fitness, params.tournament_size, 2 * pairs, rng).reshape(pairs, 2)
    a, b = pop.genomes[parents[:, 0]], pop.genomes[parents[:, 1]]
    fa, fb = pop.fitness[parents[:, 0]], pop.fitness[parents[:, 1]]
    cross = rng.random(pairs) < params.crossover_prob
    if cross.any():
        ca, cb = _crossover(a[cross], b[cross], params.swap_prob, rng)
        a, b = a.copy(), b.copy()
        a[cross], b[cross] = ca, cb
        fa, fb = np.where(cross, np.nan, fa), np.where(cross, np.nan, fb)
    children = np.stack([a, b], axis=1).reshape(2 * pairs, -1)[:n_children]
    child_fit = np.stack([fa, fb], axis=1).reshape(-1)[:n_children]

    children, mutated = _mutate(children, origin, params, rng)
    child_fit[mutated] = np.nan

    nxt = Population(
        np.vstack([pop.elite.genome[None, :], children]),
        np.concatenate([[pop.elite.fitness], child_fit]),
        elite=pop.elite, generation=pop.generation + 1, evaluations=pop.evaluations,
    )
    evaluate(nxt, fit, params)
    return nxt


def run(x, fit, params: GAParams, stop: StoppingRule | None = None, rng=None):
    """Initialise around ``x`` and evolve. Returns ``(elite, trend)``.

    The trend holds the elite fitness after each executed generation; with
    ``generations=0`` it is empty and the elite is the best initial genome.
    ``trend.evaluations`` counts every fitness evaluation performed.
    """
    x = np.asarray(x, dtype=np.float64)
    stop = stop or StoppingRule()
    rng = np.random.default_rng(params.seed) if rng is None else rng
    pop = init_population(x, params, rng)
    evaluate(pop, fit, params)
    trend = TrendLog()
    for _ in range(params.generations):
        pop = step(pop, fit, params, rng, origin=x)
        trend.append(pop.elite.fitness, stop.threshold)
        if stop.should_stop(trend.best_fitness):
            break
    trend.evaluations = pop.evaluations
    return Individual(pop.elite.genome.copy(), pop.elite.fitness), trend
