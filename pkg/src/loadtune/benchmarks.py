"""Analytic test objectives with known global minimum 0."""

import numpy as np

from .evo import Bounds


def sphere(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sum(x ** 2))


def rastrigin(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(10.0 * x.size + np.sum(x ** 2 - 10.0 * np.cos(2 * np.pi * x)))


def rosenbrock(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1.0 - x[:-1]) ** 2))


# name -> (function, dimension, bounds, population, generations, pass threshold)
SUITES = {
    "sphere": (sphere, 5, Bounds.box(-5.0, 5.0, 5), 30, 200, 1e-3),
    "rastrigin": (rastrigin, 3, Bounds.box(-5.12, 5.12, 3), 40, 300, 1e-1),
    "rosenbrock": (rosenbrock, 2, Bounds.box(-2.048, 2.048, 2), 30, 300, 1e-2),
}
