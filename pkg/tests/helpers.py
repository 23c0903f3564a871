"""Shared test utilities: finite-difference oracles and tolerances."""
from __future__ import annotations

import numpy as np


def fd_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar f at flat parameter vector x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def directional_fd(f, x: np.ndarray, u: np.ndarray, h: float = 1e-6) -> float:
    """Central finite difference of scalar f along direction u."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    return float((f(x + h * u) - f(x - h * u)) / (2.0 * h))


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Relative error between gradient vectors, robust to tiny denominators."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
