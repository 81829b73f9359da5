"""Population metaheuristics over box-bounded real vectors (minimisation).

Differential Evolution (DE/rand/1/bin), a generational Genetic Algorithm,
canonical Particle Swarm Optimisation and a uniform random-search baseline.
Every algorithm draws its initial population with a single
``rng.uniform(lower, upper, (N, D))`` call on a generator seeded from the
config, so runs sharing a seed start from the same points.

Objective values that are not finite (a diverged training run, say) are
logged and the candidate is discarded: it never becomes the incumbent and any
finite challenger replaces it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, OptimizationError, UsageError

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# Problem description
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class Bounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size < 1:
            raise DimensionError("bounds need equal-length, non-empty lower/upper vectors")
        if not np.all(lo < hi):
            raise ConfigError("every lower bound must be below its upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def box(cls, low: float, high: float, dim: int) -> "Bounds":
        return cls(np.full(dim, float(low)), np.full(dim, float(high)))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def span(self) -> np.ndarray:
        return self.upper - self.lower

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def contains(self, x: np.ndarray) -> bool:
        return bool(np.all((x >= self.lower) & (x <= self.upper)))


@dataclass
class Candidate:
    genome: np.ndarray
    fitness: Optional[float] = None

    @property
    def evaluated(self) -> bool:
        return self.fitness is not None


@dataclass
class Population:
    generation: int
    candidates: List[Candidate]
    best: Optional[Candidate] = None

    def genomes(self) -> np.ndarray:
        return np.array([c.genome for c in self.candidates])

    def fitnesses(self) -> np.ndarray:
        return np.array([np.inf if c.fitness is None else c.fitness for c in self.candidates])


@dataclass
class Objective:
    """``fn(genome) -> cost``; ``batch(genomes) -> costs`` if supplied is used
    instead so a caller can evaluate a whole generation at once."""

    fn: Optional[Callable[[np.ndarray], float]]
    bounds: Bounds
    batch: Optional[Callable[[Sequence[np.ndarray]], Sequence[float]]] = None

    @property
    def dim(self) -> int:
        return self.bounds.dim


@dataclass
class OptimizeResult:
    algorithm: str
    best: Candidate
    history: List[float]
    evaluations: int
    generations: int
    population: Optional[np.ndarray] = None


class _Evaluator:
    """Counts evaluations, enforces the budget, masks non-finite values."""

    def __init__(self, objective: Objective, budget: Optional[int]):
        self.objective = objective
        self.budget = budget
        self.count = 0

    def can_afford(self, n: int) -> bool:
        return self.budget is None or self.count + n <= self.budget

    def __call__(self, genomes: np.ndarray) -> np.ndarray:
        genomes = np.atleast_2d(genomes)
        if self.objective.batch is not None:
            raw = self.objective.batch([g.copy() for g in genomes])
        else:
            raw = [self.objective.fn(g.copy()) for g in genomes]
        self.count += len(genomes)
        values = np.asarray(raw, dtype=float)
        bad = ~np.isfinite(values)
        if bad.any():
            logger.warning("discarding %d candidate(s) with non-finite objective value", int(bad.sum()))
            values[bad] = np.inf
        return values


def _check_budget(budget, first_generation):
    if budget is not None and budget < first_generation:
        raise ConfigError(
            f"evaluation budget {budget} is smaller than one generation ({first_generation})"
        )


def _require_finite(values):
    if not np.any(np.isfinite(values)):
        raise OptimizationError("every candidate in the initial population was non-finite")


def _initial(rng, bounds: Bounds, n: int) -> np.ndarray:
    return rng.uniform(bounds.lower, bounds.upper, size=(n, bounds.dim))


# ----------------------------------------------------------------------
# Differential Evolution
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class DEConfig:
    pop_size: int = 30
    F: float = 0.8
    CR: float = 0.9
    max_generations: int = 200
    target_fitness: Optional[float] = None
    seed: int = 0
    max_evaluations: Optional[int] = None

    def __post_init__(self):
        if self.pop_size < 4:
            raise ConfigError("DE needs a population of at least 4")
        if not 0.0 <= self.F <= 2.0:
            raise ConfigError("F must lie in [0, 2]")
        if not 0.0 <= self.CR <= 1.0:
            raise ConfigError("CR must lie in [0, 1]")
        if self.max_generations < 0:
            raise ConfigError("max_generations must be >= 0")


def de_init(cfg: DEConfig, bounds: Bounds, rng: np.random.Generator) -> Population:
    genomes = _initial(rng, bounds, cfg.pop_size)
    return Population(0, [Candidate(g) for g in genomes])


def sample_distinct(n: int, exclude: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` distinct indices from ``range(n)``, none equal to ``exclude``."""
    if n - 1 < k:
        raise ConfigError(f"need at least {k + 1} members to draw {k} distinct partners")
    idx = rng.choice(n - 1, size=k, replace=False)
    idx[idx >= exclude] += 1
    return idx


def de_mutate(population: np.ndarray, i: int, F: float, rng: np.random.Generator,
              bounds: Optional[Bounds] = None, return_indices: bool = False):
    """Mutant ``x_r1 + F * (x_r2 - x_r3)``, clamped to ``bounds`` when given."""
    r1, r2, r3 = sample_distinct(len(population), i, 3, rng)
    v = population[r1] + F * (population[r2] - population[r3])
    if bounds is not None:
        v = bounds.clip(v)
    if return_indices:
        return v, (int(r1), int(r2), int(r3))
    return v


def de_crossover(target: np.ndarray, mutant: np.ndarray, CR: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Binomial crossover with one forced mutant gene.

    Draw order: the forced index first, then one uniform per gene.
    """
    if target.shape != mutant.shape:
        raise DimensionError("target and mutant differ in length")
    d = target.size
    j_rand = rng.integers(d)
    take = rng.random(d) <= CR
    take[j_rand] = True
    return np.where(take, mutant, target)


def de_select(target: Candidate, trial: Candidate) -> Candidate:
    if not (target.evaluated and trial.evaluated):
        raise UsageError("selection needs both candidates evaluated")
    return trial if trial.fitness <= target.fitness else target


def de_run(cfg: DEConfig, objective: Objective) -> OptimizeResult:
    bounds = objective.bounds
    _check_budget(cfg.max_evaluations, cfg.pop_size)
    rng = np.random.default_rng(cfg.seed)
    evaluate = _Evaluator(objective, cfg.max_evaluations)

    pop = de_init(cfg, bounds, rng)
    for c, f in zip(pop.candidates, evaluate(pop.genomes())):
        c.fitness = float(f)
    fit = pop.fitnesses()
    _require_finite(fit)
    best = int(np.argmin(fit))
    history = [float(fit[best])]

    def done():
        return cfg.target_fitness is not None and history[-1] <= cfg.target_fitness

    generation = 0
    while not done() and generation < cfg.max_generations and evaluate.can_afford(cfg.pop_size):
        x = pop.genomes()
        trials = np.empty_like(x)
        for i in range(cfg.pop_size):
            mutant = de_mutate(x, i, cfg.F, rng, bounds)
            trials[i] = de_crossover(x[i], mutant, cfg.CR, rng)
        trial_fit = evaluate(trials)
        generation += 1
        survivors = [de_select(target, Candidate(trials[i], float(trial_fit[i])))
                     for i, target in enumerate(pop.candidates)]
        pop = Population(generation, survivors)
        fit = pop.fitnesses()
        best = int(np.argmin(fit))
        history.append(float(fit[best]))

    pop.best = pop.candidates[best]
    return OptimizeResult("de", pop.best, history, evaluate.count, generation, pop.genomes())


# ----------------------------------------------------------------------
# Particle Swarm Optimisation
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class PSOConfig:
    swarm_size: int = 30
    w: float = 0.7
    c1: float = 1.5
    c2: float = 1.5
    velocity_clamp: float = 0.2
    iterations: int = 200
    seed: int = 0
    target_fitness: Optional[float] = None
    max_evaluations: Optional[int] = None

    def __post_init__(self):
        if self.swarm_size < 2:
            raise ConfigError("swarm_size must be >= 2")
        if not 0.0 <= self.w <= 1.0 or not 0.0 < self.velocity_clamp <= 1.0:
            raise ConfigError("inertia must lie in [0, 1] and velocity_clamp in (0, 1]")
        if self.c1 < 0 or self.c2 < 0:
            raise ConfigError("acceleration coefficients must be non-negative")


def pso_step(x, v, pbest, gbest, cfg: PSOConfig, bounds: Bounds, rng):
    """One velocity/position update. Returns new ``(x, v)``."""
    r1 = rng.random(x.shape)
    r2 = rng.random(x.shape)
    v = cfg.w * v + cfg.c1 * r1 * (pbest - x) + cfg.c2 * r2 * (gbest - x)
    vmax = cfg.velocity_clamp * bounds.span
    v = np.clip(v, -vmax, vmax)
    return bounds.clip(x + v), v


def pso_run(cfg: PSOConfig, objective: Objective) -> OptimizeResult:
    bounds = objective.bounds
    n = cfg.swarm_size
    _check_budget(cfg.max_evaluations, n)
    rng = np.random.default_rng(cfg.seed)
    evaluate = _Evaluator(objective, cfg.max_evaluations)

    x = _initial(rng, bounds, n)
    vmax = cfg.velocity_clamp * bounds.span
    v = rng.uniform(-vmax, vmax, size=x.shape)
    f = evaluate(x)
    _require_finite(f)
    pbest, pbest_f = x.copy(), f.copy()
    g = int(np.argmin(pbest_f))
    history = [float(pbest_f[g])]

    it = 0
    while it < cfg.iterations and evaluate.can_afford(n):
        if cfg.target_fitness is not None and history[-1] <= cfg.target_fitness:
            break
        x, v = pso_step(x, v, pbest, pbest[g], cfg, bounds, rng)
        f = evaluate(x)
        it += 1
        improved = f < pbest_f
        pbest[improved] = x[improved]
        pbest_f[improved] = f[improved]
        g = int(np.argmin(pbest_f))
        history.append(float(pbest_f[g]))

    best = Candidate(pbest[g].copy(), float(pbest_f[g]))
    return OptimizeResult("pso", best, history, evaluate.count, it, pbest.copy())


# ----------------------------------------------------------------------
# Genetic Algorithm
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class GAConfig:
    pop_size: int = 30
    tournament_size: int = 3
    crossover_rate: float = 0.9
    mutation_sigma: float = 0.05
    mutation_rate: Optional[float] = None  # per gene; None -> 1/D
    elitism: int = 2
    generations: int = 200
    seed: int = 0
    target_fitness: Optional[float] = None
    max_evaluations: Optional[int] = None

    def __post_init__(self):
        if self.pop_size < 2 or self.tournament_size < 2:
            raise ConfigError("population and tournament sizes must be >= 2")
        if self.tournament_size > self.pop_size:
            raise ConfigError("tournament cannot exceed the population")
        if not 0.0 <= self.crossover_rate <= 1.0 or not 0.0 <= self.mutation_sigma <= 1.0:
            raise ConfigError("crossover_rate and mutation_sigma must lie in [0, 1]")
        if self.mutation_rate is not None and not 0.0 <= self.mutation_rate <= 1.0:
            raise ConfigError("mutation_rate must lie in [0, 1]")
        if not 0 <= self.elitism < self.pop_size:
            raise ConfigError("elitism must be smaller than the population")


def tournament(fitness: np.ndarray, k: int, rng) -> int:
    """Index of the fittest (lowest) of ``k`` distinct random members."""
    entrants = rng.choice(len(fitness), size=k, replace=False)
    return int(entrants[np.argmin(fitness[entrants])])


def ga_vary(parents: np.ndarray, cfg: GAConfig, bounds: Bounds, rng) -> np.ndarray:
    """Uniform crossover on consecutive parent pairs, then Gaussian mutation."""
    children = parents.copy()
    d = parents.shape[1]
    for a in range(0, len(parents) - 1, 2):
        if rng.random() < cfg.crossover_rate:
            swap = rng.random(d) < 0.5
            children[a, swap] = parents[a + 1, swap]
            children[a + 1, swap] = parents[a, swap]
    rate = 1.0 / d if cfg.mutation_rate is None else cfg.mutation_rate
    hit = rng.random(children.shape) < rate
    noise = rng.normal(0.0, 1.0, children.shape) * (cfg.mutation_sigma * bounds.span)
    children = children + np.where(hit, noise, 0.0)
    return bounds.clip(children)


def ga_run(cfg: GAConfig, objective: Objective) -> OptimizeResult:
    bounds = objective.bounds
    n = cfg.pop_size
    _check_budget(cfg.max_evaluations, n)
    rng = np.random.default_rng(cfg.seed)
    evaluate = _Evaluator(objective, cfg.max_evaluations)

    x = _initial(rng, bounds, n)
    f = evaluate(x)
    _require_finite(f)
    b = int(np.argmin(f))
    best = Candidate(x[b].copy(), float(f[b]))
    history = [best.fitness]
    n_children = n - cfg.elitism

    gen = 0
    while gen < cfg.generations and evaluate.can_afford(n_children):
        if cfg.target_fitness is not None and history[-1] <= cfg.target_fitness:
            break
        order = np.argsort(f, kind="stable")
        elite = order[:cfg.elitism]
        parents = np.array([x[tournament(f, cfg.tournament_size, rng)] for _ in range(n_children)])
        children = ga_vary(parents, cfg, bounds, rng)
        child_f = evaluate(children)
        gen += 1
        x = np.concatenate([x[elite], children])
        f = np.concatenate([f[elite], child_f])
        b = int(np.argmin(f))
        if f[b] < best.fitness:
            best = Candidate(x[b].copy(), float(f[b]))
        history.append(best.fitness)

    return OptimizeResult("ga", best, history, evaluate.count, gen, x)


# ----------------------------------------------------------------------
# Random search
# ----------------------------------------------------------------------


def random_run(objective: Objective, max_evaluations: int, seed: int = 0,
               batch_size: int = 10) -> OptimizeResult:
    """Uniform sampling in batches; history holds best-so-far per batch."""
    if batch_size < 1 or max_evaluations < 1:
        raise ConfigError("batch_size and max_evaluations must be positive")
    bounds = objective.bounds
    rng = np.random.default_rng(seed)
    evaluate = _Evaluator(objective, max_evaluations)
    best_x, best_f = None, np.inf
    history: List[float] = []
    batches = 0
    while evaluate.count < max_evaluations:
        n = min(batch_size, max_evaluations - evaluate.count)
        x = _initial(rng, bounds, n)
        f = evaluate(x)
        i = int(np.argmin(f))
        if f[i] < best_f or best_x is None:
            best_x, best_f = x[i].copy(), float(f[i])
        history.append(best_f)
        batches += 1
    if not np.isfinite(best_f):
        raise OptimizationError("random search found no finite objective value")
    return OptimizeResult("random", Candidate(best_x, best_f), history, evaluate.count, batches - 1)


ALGORITHMS = ("de", "ga", "pso", "random")
