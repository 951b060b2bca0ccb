"""Tensors, seeded randomness and the finite-difference gradient oracle.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Randomness
comes from :class:`Rng`, a thin wrapper over numpy's Philox4x64 counter-based
generator, whose streams are bit-reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from spheremetric.errors import ContractError, NumericalError

DTYPE = np.float64


class Rng:
    """Single-owner seeded generator (Philox4x64-10).

    ``child(i)`` derives an independent stream from (seed, path of child indices)
    through ``numpy.random.SeedSequence`` without consuming draws from the parent.
    """

    def __init__(self, seed: int = 0, path: tuple[int, ...] = ()):
        if seed < 0:
            raise ContractError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        if self.path:
            key = np.random.SeedSequence(self.seed, spawn_key=self.path).generate_state(2, np.uint64)
            self.gen = np.random.Generator(np.random.Philox(key=key))
        else:
            self.gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, stream: int) -> "Rng":
        return Rng(self.seed, self.path + (int(stream),))

    def normal(self, shape, mean=0.0, stddev=1.0) -> np.ndarray:
        return draw_normal(self, shape, mean, stddev)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def random(self, size=None):
        return self.gen.random(size)


def as_tensor(values, shape=None) -> np.ndarray:
    t = np.array(values, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != t.size:
            raise ContractError(f"cannot view {t.size} values as shape {shape}")
        t = t.reshape(shape)
    return t


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise NumericalError(f"non-finite values in {what}")
    return t


def draw_normal(rng: Rng, shape, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
    if stddev < 0:
        raise ContractError(f"stddev must be >= 0, got {stddev}")
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    z = rng.gen.standard_normal(shape)
    return mean + stddev * z


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_index: tuple
    analytic: np.ndarray
    numeric: np.ndarray

    def __bool__(self):
        return self.passed


def numeric_gradient(f: Callable[[np.ndarray], float], point: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(point, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"f is not finite near coordinate {i}")
        g[i] = (fp - fm) / (2.0 * step)
    return grad


def finite_difference_check(f, point, analytic_grad, step: float = 1e-5, tolerance: float = 1e-5) -> GradCheckReport:
    """Compare ``analytic_grad`` against central differences of ``f`` at ``point``.

    The relative error per element is ``|a - n| / max(1, |a|, |n|)``; the check
    passes when the largest one is at most ``tolerance``.
    """
    if not (0 < step <= 1e-2):
        raise ContractError(f"step must be in (0, 1e-2], got {step}")
    if tolerance <= 0:
        raise ContractError("tolerance must be positive")
    point = np.asarray(point, dtype=DTYPE)
    analytic = np.asarray(analytic_grad, dtype=DTYPE)
    if analytic.shape != point.shape:
        raise ContractError(f"gradient shape {analytic.shape} != point shape {point.shape}")
    numeric = numeric_gradient(f, point, step)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    if rel.size == 0:
        return GradCheckReport(True, 0.0, (), analytic, numeric)
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
    err = float(rel[worst])
    return GradCheckReport(err <= tolerance, err, tuple(int(i) for i in worst), analytic, numeric)
