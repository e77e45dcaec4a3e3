"""Numerical substrate: dense products, seeded random streams, finite differences.

Random streams use numpy's ``PCG64`` bit generator seeded through
``SeedSequence(seed, spawn_key=(purpose, ...))``.  Every consumer asks for a
stream by *purpose* (partitioning, initialisation, batching, ...) plus any
extra integer keys (round, client id), so drawing more numbers in one stage
never shifts the numbers seen by another stage.
"""

from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

__all__ = [
    "ConfigurationError",
    "ProtocolError",
    "NonFiniteError",
    "matmul",
    "finite_diff_grad",
    "make_rng",
    "sample_uniform",
    "sample_dirichlet",
    "sample_gaussian",
    "softmax",
    "log_softmax",
]

DTYPE = np.float64


class ConfigurationError(ValueError):
    """Invalid shapes, parameters or configuration values."""


class ProtocolError(RuntimeError):
    """A federation step was invoked in a state the protocol does not allow."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where a finite value is required."""


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense product ``a @ b`` of two 2-D float64 matrices.

    Accumulation order is whatever the linked BLAS uses; results are
    reproducible on a fixed machine but not bit-portable across BLAS builds.
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise ConfigurationError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if not h > 0:
        raise ConfigurationError("finite difference step must be positive")
    x = np.array(x, dtype=DTYPE).ravel()
    grad = np.empty_like(x)
    for k in range(x.size):
        orig = x[k]
        x[k] = orig + h
        fp = float(f(x))
        x[k] = orig - h
        fm = float(f(x))
        x[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value when perturbing coordinate {k}")
        grad[k] = (fp - fm) / (2.0 * h)
    return grad


# Fixed integer tags so stream derivation does not depend on Python's hash seed.
def _purpose_key(purpose: str | int) -> int:
    if isinstance(purpose, (int, np.integer)):
        return int(purpose)
    return zlib.crc32(purpose.encode("utf-8"))


def make_rng(seed: int, purpose: str | int = 0, *keys: int) -> np.random.Generator:
    """Independent PCG64 stream for ``(seed, purpose, *keys)``."""
    spawn_key = (_purpose_key(purpose),) + tuple(int(k) for k in keys)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=spawn_key)))


def sample_uniform(rng: np.random.Generator, lo: float, hi: float, n: int) -> np.ndarray:
    if not lo < hi:
        raise ConfigurationError(f"uniform bounds need lo < hi, got ({lo}, {hi})")
    return rng.uniform(lo, hi, size=int(n))


def sample_gaussian(rng: np.random.Generator, mean: float, std: float, n: int) -> np.ndarray:
    if std < 0:
        raise ConfigurationError("gaussian std must be non-negative")
    return mean + std * rng.standard_normal(int(n))


def sample_dirichlet(rng: np.random.Generator, alpha) -> np.ndarray:
    """Dirichlet draw from per-component Gamma variates, normalised.

    Each component uses ``Gamma(a + 1) * U**(1/a)`` evaluated in log space
    (numpy's ``standard_gamma`` is Marsaglia-Tsang for shape >= 1), so small
    concentrations never underflow to exact zeros.
    """
    alpha = np.asarray(alpha, dtype=DTYPE).ravel()
    if alpha.size == 0 or not np.all(alpha > 0) or not np.all(np.isfinite(alpha)):
        raise ConfigurationError("dirichlet concentrations must be finite and positive")
    g = rng.standard_gamma(alpha + 1.0)
    u = rng.random(alpha.size)
    logs = np.log(g) + np.log1p(-u) / alpha
    logs -= logs.max()
    w = np.exp(logs)
    w /= w.sum()
    if np.any(w <= 0):
        # log-space span exceeded float range; keep strictly positive.
        w = np.maximum(w, np.finfo(DTYPE).tiny)
        w /= w.sum()
    return w


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
