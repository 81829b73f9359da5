import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loadtune.data import generate_synthetic, prepare
from loadtune.errors import ConfigError, UsageError
from loadtune.forecaster import Hyperparams, ModelConfig, build_model, fit
from loadtune.metrics import mape, mse
from loadtune.tuner import (ALGORITHM_NAMES, MANUAL_DEFAULT, FitnessCache, SearchSpace,
                            TuneReport, baseline_report, effective, evaluate_candidate,
                            report_render, tune)

SPACE = SearchSpace()
SMALL = ModelConfig.small()

# midpoint of the log-scaled learning-rate range: 10 ** ((log10(1e-5) + log10(0.5)) / 2)
LR_MIDPOINT = 0.00223606797749979


@pytest.fixture(scope="module")
def records():
    return generate_synthetic(1000, seed=21)


def fresh(records):
    return prepare(records)


def strip_wall(d):
    if isinstance(d, dict):
        return {k: strip_wall(v) for k, v in d.items() if k != "wall_time"}
    if isinstance(d, list):
        return [strip_wall(v) for v in d]
    return d


# -- decode ------------------------------------------------------------------------


def test_decode_corners_and_midpoint():
    assert SPACE.decode([0, 0, 0]) == Hyperparams(8, 10, 1e-5)
    hi = SPACE.decode([1, 1, 1])
    assert (hi.batch_size, hi.epochs) == (256, 1000)
    assert hi.learning_rate == pytest.approx(0.5, rel=1e-15)
    mid = SPACE.decode([0.5, 0.5, 0.5])
    assert (mid.batch_size, mid.epochs) == (132, 505)
    assert mid.learning_rate == pytest.approx(LR_MIDPOINT, rel=1e-14)
    assert LR_MIDPOINT == pytest.approx(math.sqrt(1e-5 * 0.5), rel=1e-15)
    assert type(mid.learning_rate) is float


def test_space_encloses_reference_values():
    # best settings reported for GA, PSO and DE on the real data
    for batch, epochs, lr in [(80, 844, 0.0001), (173, 35, 0.3109), (24, 1000, 0.1)]:
        assert SPACE.batch_min <= batch <= SPACE.batch_max
        assert SPACE.epochs_min <= epochs <= SPACE.epochs_max
        assert SPACE.lr_min <= lr <= SPACE.lr_max
        hp = Hyperparams(batch, epochs, lr)
        back = SPACE.decode(SPACE.encode(hp))
        assert (back.batch_size, back.epochs) == (batch, epochs)
        assert back.learning_rate == pytest.approx(lr, rel=1e-12)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.integers(0, 2), st.floats(0, 1))
def test_decode_monotone_per_gene(g, gene, bump):
    lo = list(g)
    up = list(g)
    up[gene] = max(g[gene], bump)
    a, b = SPACE.decode(lo), SPACE.decode(up)
    assert b.batch_size >= a.batch_size and b.epochs >= a.epochs and b.learning_rate >= a.learning_rate


def test_space_validation():
    with pytest.raises(ConfigError):
        SearchSpace(batch_min=10, batch_max=5)


def test_effective_caps_epochs():
    hp = Hyperparams(32, 50, 0.01)
    assert effective(hp, 30).epochs == 30
    assert effective(hp, None) is hp and effective(hp, 80) is hp


# -- candidate evaluation --------------------------------------------------------------


def test_cache_hit_skips_training(records):
    data = fresh(records)
    cache = FitnessCache()
    hp = Hyperparams(64, 40, 0.01)
    first = evaluate_candidate(hp, data, SMALL, 0, epoch_cap=2, cache=cache)
    assert (cache.hits, cache.misses) == (0, 1)
    # a different raw epoch count that caps to the same training run
    second = evaluate_candidate(Hyperparams(64, 99, 0.01), data, SMALL, 0, epoch_cap=2, cache=cache)
    assert (cache.hits, cache.misses) == (1, 1)
    assert first == second and np.isfinite(first)
    assert data.test_reads == 0


def test_fitness_is_final_epoch_val_mse(records):
    data = fresh(records)
    hp = Hyperparams(64, 3, 0.01)
    model = build_model(SMALL, 4)
    rep = fit(model, data.train, data.val, hp, 4)
    assert evaluate_candidate(hp, data, SMALL, 4) == rep.val_loss[-1]


def test_divergence_is_a_marker_not_a_crash(records):
    data = fresh(records)
    assert math.isnan(evaluate_candidate(Hyperparams(8, 2, 1e6), data, SMALL, 0))
    upper = evaluate_candidate(Hyperparams(8, 2, 0.5), data, SMALL, 0)
    assert isinstance(upper, float)


def test_disabled_cache_stores_nothing(records):
    data = fresh(records)
    cache = FitnessCache(enabled=False)
    hp = Hyperparams(64, 2, 0.01)
    a = evaluate_candidate(hp, data, SMALL, 0, cache=cache)
    b = evaluate_candidate(hp, data, SMALL, 0, cache=cache)
    assert a == b and len(cache) == 0 and cache.misses == 2


# -- tune ------------------------------------------------------------------------------


def small_tune(records, algorithm, **kw):
    data = fresh(records)
    args = dict(budget=12, seed=3, model_cfg=SMALL, epoch_cap=2, pop_size=4)
    args.update(kw)
    return tune(algorithm, data, **args), data


@pytest.mark.parametrize("algorithm", ["de", "ga", "pso", "random"])
def test_tune_report_contract(records, algorithm):
    report, data = small_tune(records, algorithm)
    assert report.algorithm == algorithm
    assert report.evaluations <= report.budget == 12
    assert data.test_reads == 1
    assert report.best_val_mse is not None and report.best_val_mse >= 0
    assert report.test_mse is not None and report.test_mape is not None
    assert report.history and all(h is None or h >= 0 for h in report.history)
    assert report.epoch_cap == 2 and report.seed == 3
    assert report.settings["model_config"]["heads"] == 2
    assert isinstance(report.best, Hyperparams)


def test_tune_metrics_in_megawatts(records):
    report, data = small_tune(records, "random")
    full = data.train.concat(data.val)
    model = build_model(SMALL, 3)
    fit(model, full, data.val, effective(report.best, 2), 3)
    test = data._test
    pred = test.inverse_target(model.predict_batch(test.inputs))
    actual = test.inverse_target(test.targets)
    assert actual.min() > 100  # MW scale, not standardized units
    assert report.test_mape == mape(actual, pred)
    assert report.test_mse == mse(actual, pred)


def test_tune_is_deterministic(records):
    a, _ = small_tune(records, "de")
    b, _ = small_tune(records, "de")
    assert strip_wall(a.to_dict()) == strip_wall(b.to_dict())


def test_cache_transparency(records):
    on, _ = small_tune(records, "ga", cache=FitnessCache())
    off, _ = small_tune(records, "ga", cache=FitnessCache(enabled=False))
    a, b = strip_wall(on.to_dict()), strip_wall(off.to_dict())
    a.pop("evaluations"), b.pop("evaluations")
    assert a == b
    assert on.evaluations <= off.evaluations


def test_shared_cache_counts_only_new_trainings(records):
    cache = FitnessCache()
    first, _ = small_tune(records, "de", cache=cache)
    again, _ = small_tune(records, "de", cache=cache)
    assert again.evaluations == 0
    assert again.best == first.best and again.best_val_mse == first.best_val_mse


def test_worker_pool_matches_serial(records):
    serial, _ = small_tune(records, "pso")
    pooled, _ = small_tune(records, "pso", workers=2)
    assert strip_wall(serial.to_dict()) == strip_wall(pooled.to_dict())


def test_tuned_hyperparams_beat_the_default():
    data = prepare(generate_synthetic(2000, seed=31))
    cache = FitnessCache()
    report = tune("de", data, 30, 0, model_cfg=SMALL, epoch_cap=20, pop_size=10, cache=cache)
    default = evaluate_candidate(MANUAL_DEFAULT, data, SMALL, 0, epoch_cap=20, cache=cache)
    assert report.best_val_mse < default


def test_budget_below_one_generation(records):
    with pytest.raises(ConfigError):
        small_tune(records, "de", budget=3)
    with pytest.raises(ConfigError):
        small_tune(records, "hill-climb")


def test_baseline_report(records):
    data = fresh(records)
    rep = baseline_report(MANUAL_DEFAULT, data, 0, SMALL, epoch_cap=2)
    assert rep.display_name == "Manual Selection"
    assert rep.best == MANUAL_DEFAULT and data.test_reads == 1
    assert rep.test_mape is not None


# -- reports ---------------------------------------------------------------------------


def fixture_report(algorithm, batch, epochs, lr, mape_value):
    return TuneReport(algorithm, Hyperparams(batch, epochs, lr), None, None, mape_value)


def test_render_reference_table():
    reports = [
        fixture_report("manual", 32, 50, 0.01, 2.07),
        fixture_report("ga", 80, 844, 0.0001, 1.31),
        fixture_report("pso", 173, 35, 0.3109, 1.28),
        fixture_report("de", 24, 1000, 0.1, 1.11),
    ]
    text = report_render(reports)
    lines = text.splitlines()
    assert lines[0].split()[0] == "Metaheuristics" and lines[0].rstrip().endswith("MAPE")
    assert lines[2].startswith("Manual Selection") and lines[2].endswith("2.07")
    for line, (name, value) in zip(lines[3:], [("Genetic Algorithm", "1.31"),
                                               ("Particle Swarm", "1.28"),
                                               ("Differential Evolution", "1.11")]):
        assert line.startswith(name) and line.endswith(value)
    assert "0.3109" in lines[4] and " 844 " in lines[3]
    assert len({len(line) for line in lines[:2]}) == 1


def test_render_single_and_empty():
    text = report_render([fixture_report("de", 24, 1000, 0.1, 1.1149)])
    data_rows = text.splitlines()[2:]
    assert len(data_rows) == 1 and data_rows[0].endswith("1.11")
    with pytest.raises(UsageError):
        report_render([])


def test_report_json_round_trip(records):
    report, _ = small_tune(records, "random")
    text = report.to_json()
    back = TuneReport.from_dict(json.loads(text))
    assert back.to_json() == text
    assert back.display_name == ALGORITHM_NAMES["random"]
