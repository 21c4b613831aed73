"""Finite-difference gradient checking.

The independent oracle for every backward rule in this package: central
differences on the scalar loss, one perturbed entry at a time.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ConfigError, require


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f at x.

    Perturbs one entry at a time: (f(x + eps*e) - f(x - eps*e)) / (2*eps).
    O(x.size) evaluations of f, so keep the arrays small.
    """
    require(eps > 0, ConfigError, f"eps must be positive, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g


def max_rel_err(got: np.ndarray, want: np.ndarray,
                floor: float = 1e-8) -> float:
    """Largest entrywise |got - want| / max(|want|, floor).

    The floor keeps near-zero reference entries from blowing up the ratio;
    for those entries this reduces to an absolute comparison.
    """
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    require(got.shape == want.shape, ConfigError,
            f"shape mismatch: {got.shape} vs {want.shape}")
    denom = np.maximum(np.abs(want), floor)
    return float(np.max(np.abs(got - want) / denom)) if got.size else 0.0


def grad_rel_err(got: np.ndarray, want: np.ndarray) -> float:
    """Relative error between gradient arrays: the max-norm of the
    difference over the max-norm of the reference.

    Normalizing by the largest reference entry (instead of entrywise)
    keeps finite-difference roundoff on near-zero entries from dominating
    the comparison.
    """
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    require(got.shape == want.shape, ConfigError,
            f"shape mismatch: {got.shape} vs {want.shape}")
    scale = max(float(np.max(np.abs(want))) if want.size else 0.0, 1e-12)
    diff = float(np.max(np.abs(got - want))) if got.size else 0.0
    return diff / scale
