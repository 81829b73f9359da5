"""Hyperparameter tuning: decode unit-cube genomes into (batch size, epochs,
learning rate), score them by validation MSE of a freshly trained forecaster,
and summarise runs in comparison tables."""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import evo
from .data import PreparedData
from .errors import ConfigError, DivergenceError, UsageError
from .forecaster import Hyperparams, ModelConfig, build_model, fit
from .metrics import mape, mse

logger = logging.getLogger(__name__)

ALGORITHM_NAMES = {
    "manual": "Manual Selection",
    "random": "Random Search",
    "ga": "Genetic Algorithm",
    "pso": "Particle Swarm",
    "de": "Differential Evolution",
}

MANUAL_DEFAULT = Hyperparams(batch_size=32, epochs=50, learning_rate=0.01)


def _half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


@dataclass(frozen=True)
class SearchSpace:
    batch_min: int = 8
    batch_max: int = 256
    epochs_min: int = 10
    epochs_max: int = 1000
    lr_min: float = 1e-5
    lr_max: float = 0.5

    def __post_init__(self):
        if not (1 <= self.batch_min < self.batch_max and 1 <= self.epochs_min < self.epochs_max
                and 0 < self.lr_min < self.lr_max):
            raise ConfigError("search space ranges must be non-empty and positive")

    dim = 3

    def bounds(self) -> evo.Bounds:
        return evo.Bounds.box(0.0, 1.0, self.dim)

    def decode(self, genome) -> Hyperparams:
        g = np.clip(np.asarray(genome, dtype=float), 0.0, 1.0)
        batch = _half_up(self.batch_min + g[0] * (self.batch_max - self.batch_min))
        epochs = _half_up(self.epochs_min + g[1] * (self.epochs_max - self.epochs_min))
        lo, hi = math.log10(self.lr_min), math.log10(self.lr_max)
        lr = float(10.0 ** (lo + g[2] * (hi - lo)))
        return Hyperparams(batch, epochs, lr)

    def encode(self, hp: Hyperparams) -> np.ndarray:
        lo, hi = math.log10(self.lr_min), math.log10(self.lr_max)
        return np.clip(np.array([
            (hp.batch_size - self.batch_min) / (self.batch_max - self.batch_min),
            (hp.epochs - self.epochs_min) / (self.epochs_max - self.epochs_min),
            (math.log10(hp.learning_rate) - lo) / (hi - lo),
        ]), 0.0, 1.0)


def effective(hp: Hyperparams, epoch_cap: Optional[int]) -> Hyperparams:
    if epoch_cap is not None and hp.epochs > epoch_cap:
        return replace(hp, epochs=epoch_cap)
    return hp


# ----------------------------------------------------------------------
# Fitness cache
# ----------------------------------------------------------------------


class FitnessCache:
    """Fitness keyed on the hyperparameters actually trained (after any
    epoch cap) plus model config and seed. First insert wins.

    A disabled cache stores nothing, so every lookup misses.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._store: Dict[tuple, Tuple[float, str]] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(hp: Hyperparams, cfg: ModelConfig, seed: int) -> tuple:
        return (hp.batch_size, hp.epochs, float(hp.learning_rate), cfg, int(seed))

    def get(self, key):
        with self._lock:
            found = self._store.get(key)
            if found is not None:
                self.hits += 1
            return found

    def insert(self, key, value: Tuple[float, str]) -> Tuple[float, str]:
        with self._lock:
            self.misses += 1
            if not self.enabled:
                return value
            return self._store.setdefault(key, value)

    def __len__(self):
        return len(self._store)


# ----------------------------------------------------------------------
# Candidate evaluation
# ----------------------------------------------------------------------


def _train_score(hp: Hyperparams, cfg: ModelConfig, seed: int, train, val) -> Tuple[float, str]:
    model = build_model(cfg, seed)
    try:
        report = fit(model, train, val, hp, seed)
    except DivergenceError as exc:
        logger.warning("candidate %s diverged: %s", hp, exc)
        return float("nan"), "diverged"
    return report.val_loss[-1], report.digest()


_WORKER_DATA = None


def _worker_init(train, val):
    global _WORKER_DATA
    _WORKER_DATA = (train, val)


def _worker_score(args):
    hp, cfg, seed = args
    return _train_score(hp, cfg, seed, *_WORKER_DATA)


def evaluate_candidate(hp: Hyperparams, data: PreparedData, model_cfg: ModelConfig,
                       seed: int, epoch_cap: Optional[int] = None,
                       cache: Optional[FitnessCache] = None) -> float:
    """Final-epoch validation MSE of a model trained with ``hp`` (NaN if it diverges)."""
    hp = effective(hp, epoch_cap)
    if cache is None:
        return _train_score(hp, model_cfg, seed, data.train, data.val)[0]
    key = FitnessCache.key(hp, model_cfg, seed)
    found = cache.get(key)
    if found is None:
        found = cache.insert(key, _train_score(hp, model_cfg, seed, data.train, data.val))
    return found[0]


class _BatchScorer:
    """Objective ``batch`` hook: dedupes a generation by trained hyperparams,
    serves cache hits, trains the misses (optionally in worker processes)."""

    def __init__(self, space, data, cfg, seed, epoch_cap, cache, workers):
        self.space, self.data, self.cfg, self.seed = space, data, cfg, seed
        self.epoch_cap, self.cache, self.workers = epoch_cap, cache, workers
        self._pool = None

    def __call__(self, genomes):
        hps = [effective(self.space.decode(g), self.epoch_cap) for g in genomes]
        keys = [FitnessCache.key(hp, self.cfg, self.seed) for hp in hps]
        found, todo = {}, {}
        for k, hp in zip(keys, hps):
            if k in found or k in todo:
                continue
            hit = self.cache.get(k)
            if hit is None:
                todo[k] = hp
            else:
                found[k] = hit
        if todo:
            jobs = list(todo.items())
            if self.workers > 1:
                if self._pool is None:
                    self._pool = ProcessPoolExecutor(
                        self.workers, initializer=_worker_init,
                        initargs=(self.data.train, self.data.val))
                results = list(self._pool.map(_worker_score,
                                              [(hp, self.cfg, self.seed) for _, hp in jobs]))
            else:
                results = [_train_score(hp, self.cfg, self.seed, self.data.train, self.data.val)
                           for _, hp in jobs]
            for (k, _), res in zip(jobs, results):
                found[k] = self.cache.insert(k, res)
        return [found[k][0] for k in keys]

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


# ----------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------


@dataclass
class TuneReport:
    algorithm: str
    best: Hyperparams
    best_val_mse: Optional[float]
    test_mse: Optional[float]
    test_mape: Optional[float]
    history: List[float] = field(default_factory=list)
    evaluations: int = 0
    budget: int = 0
    seed: int = 0
    epoch_cap: Optional[int] = None
    settings: dict = field(default_factory=dict)
    final_train: Optional[dict] = None
    wall_time: float = 0.0

    @property
    def display_name(self) -> str:
        return ALGORITHM_NAMES.get(self.algorithm, self.algorithm)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["best"] = asdict(self.best)
        return d

    @classmethod
    def from_dict(cls, d) -> "TuneReport":
        d = dict(d)
        d["best"] = Hyperparams(**d["best"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _finite_or_none(v):
    return float(v) if v is not None and np.isfinite(v) else None


def _final_evaluation(hp: Hyperparams, data: PreparedData, cfg: ModelConfig, seed: int,
                      epoch_cap: Optional[int]):
    """Retrain on train+val, then the single read of the test windows."""
    full = data.train.concat(data.val)
    model = build_model(cfg, seed)
    test = data.take_test()
    try:
        report = fit(model, full, data.val, effective(hp, epoch_cap), seed)
    except DivergenceError as exc:
        logger.warning("final retrain with %s diverged: %s", hp, exc)
        return None, None, None
    pred = test.inverse_target(model.predict_batch(test.inputs))
    actual = test.inverse_target(test.targets)
    return mse(actual, pred), mape(actual, pred), report.to_dict()


def tune(algorithm: str, data: PreparedData, budget: int, seed: int,
         space: SearchSpace = SearchSpace(), model_cfg: ModelConfig = ModelConfig(),
         epoch_cap: Optional[int] = None, pop_size: int = 10, workers: int = 1,
         cache: Optional[FitnessCache] = None, options: Optional[dict] = None) -> TuneReport:
    """Search hyperparameters with ``algorithm`` under an evaluation budget,
    then retrain the winner on train+val and score it once on test (MW units)."""
    if algorithm not in evo.ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}; choose from {evo.ALGORITHMS}")
    if budget < pop_size:
        raise ConfigError(f"budget {budget} is smaller than one generation ({pop_size})")
    options = dict(options or {})
    cache = cache if cache is not None else FitnessCache()
    started = time.perf_counter()
    misses_before = cache.misses

    scorer = _BatchScorer(space, data, model_cfg, seed, epoch_cap, cache, workers)
    objective = evo.Objective(None, space.bounds(), batch=scorer)
    many = budget  # generation counts are bounded by the budget anyway
    try:
        if algorithm == "de":
            cfg = evo.DEConfig(pop_size=pop_size, max_generations=many, seed=seed,
                               max_evaluations=budget, **options)
            result = evo.de_run(cfg, objective)
        elif algorithm == "ga":
            cfg = evo.GAConfig(pop_size=pop_size, generations=many, seed=seed,
                               max_evaluations=budget, **options)
            result = evo.ga_run(cfg, objective)
        elif algorithm == "pso":
            cfg = evo.PSOConfig(swarm_size=pop_size, iterations=many, seed=seed,
                                max_evaluations=budget, **options)
            result = evo.pso_run(cfg, objective)
        else:
            cfg = {"batch_size": pop_size, **options}
            result = evo.random_run(objective, budget, seed, batch_size=pop_size)
    finally:
        scorer.close()

    best = space.decode(result.best.genome)
    test_mse, test_mape, final = _final_evaluation(best, data, model_cfg, seed, epoch_cap)
    settings = {
        "algorithm_config": asdict(cfg) if not isinstance(cfg, dict) else cfg,
        "model_config": asdict(model_cfg),
        "search_space": asdict(space),
        "split": data.split.to_dict(),
        "features": list(data.features),
    }
    return TuneReport(
        algorithm=algorithm,
        best=best,
        best_val_mse=_finite_or_none(result.best.fitness),
        test_mse=_finite_or_none(test_mse),
        test_mape=_finite_or_none(test_mape),
        history=[float(h) if np.isfinite(h) else None for h in result.history],
        evaluations=cache.misses - misses_before,
        budget=budget,
        seed=seed,
        epoch_cap=epoch_cap,
        settings=settings,
        final_train=final,
        wall_time=time.perf_counter() - started,
    )


def baseline_report(hp: Hyperparams, data: PreparedData, seed: int,
                    model_cfg: ModelConfig = ModelConfig(), epoch_cap: Optional[int] = None,
                    cache: Optional[FitnessCache] = None, name: str = "manual") -> TuneReport:
    """Score a hand-picked configuration through the same train/val/test path."""
    started = time.perf_counter()
    val = evaluate_candidate(hp, data, model_cfg, seed, epoch_cap, cache)
    test_mse, test_mape, final = _final_evaluation(hp, data, model_cfg, seed, epoch_cap)
    return TuneReport(
        algorithm=name, best=hp, best_val_mse=_finite_or_none(val),
        test_mse=_finite_or_none(test_mse), test_mape=_finite_or_none(test_mape),
        evaluations=1, budget=1, seed=seed, epoch_cap=epoch_cap,
        settings={"model_config": asdict(model_cfg), "split": data.split.to_dict(),
                  "features": list(data.features)},
        final_train=final, wall_time=time.perf_counter() - started,
    )


def _fmt(v, spec):
    return "-" if v is None else format(v, spec)


def report_render(reports: Sequence[TuneReport]) -> str:
    """Aligned text table: one row per report, MAPE last with two decimals."""
    if not reports:
        raise UsageError("nothing to render: no reports given")
    header = ("Metaheuristics", "Batch Size", "Epoch", "Learning Rate", "Val MSE", "MAPE")
    rows = [header]
    for r in reports:
        rows.append((
            r.display_name,
            str(r.best.batch_size),
            str(r.best.epochs),
            format(r.best.learning_rate, ".4g"),
            _fmt(r.best_val_mse, ".4f"),
            _fmt(r.test_mape, ".2f"),
        ))
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for n, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
