"""Forecast error metrics: MSE (fitness and loss) and MAPE (headline figure)."""

from dataclasses import dataclass

import numpy as np

from .errors import UsageError

MAPE_GUARD = 1e-9


@dataclass(frozen=True)
class EvalResult:
    mse: float
    mape: float
    count: int


def _pair(actual, predicted):
    a = np.asarray(actual, dtype=float).ravel()
    p = np.asarray(predicted, dtype=float).ravel()
    if a.shape != p.shape:
        raise UsageError(f"length mismatch: {a.size} actual vs {p.size} predicted")
    if a.size == 0:
        raise UsageError("metrics need at least one sample")
    return a, p


def mse(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    d = a - p
    return float(np.mean(d * d))


def mape(actual, predicted) -> float:
    """Mean absolute percentage error in percent.

    Raises if any ``|actual|`` is at or below :data:`MAPE_GUARD`; zero load
    means corrupted data and must be filtered by the caller.
    """
    a, p = _pair(actual, predicted)
    if np.any(np.abs(a) <= MAPE_GUARD):
        raise UsageError("MAPE undefined: actual series contains (near-)zero values")
    return float(100.0 * np.mean(np.abs(a - p) / np.abs(a)))


def evaluate(actual, predicted) -> EvalResult:
    a, p = _pair(actual, predicted)
    return EvalResult(mse(a, p), mape(a, p), a.size)
