"""Matrix-free curvature estimators built on Hessian-vector products."""

from __future__ import annotations

import warnings
from typing import Callable

import numpy as np

HvpFn = Callable[[np.ndarray], np.ndarray]


class ConvergenceWarning(RuntimeWarning):
    pass


def rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def hutchinson_diagonal(hvp_fn: HvpFn, shape, n_probes: int, rng: np.random.Generator) -> np.ndarray:
    """Estimate diag(H) as the probe mean of ``v * Hv`` with Rademacher ``v``."""
    if n_probes < 1:
        raise ValueError("need at least one probe")
    acc = np.zeros(shape)
    for _ in range(n_probes):
        v = rademacher(rng, shape)
        acc += v * hvp_fn(v)
    return acc / n_probes


def hutchinson_trace(hvp_fn: HvpFn, shape, n_probes: int, rng: np.random.Generator) -> float:
    return float(np.sum(hutchinson_diagonal(hvp_fn, shape, n_probes, rng)))


def power_iteration(hvp_fn: HvpFn, shape, rng: np.random.Generator,
                    n_iter: int = 20, tol: float = 1e-4) -> tuple[float, bool]:
    """Dominant eigenvalue of H by power iteration with a Rayleigh-quotient estimate.

    Returns ``(eigenvalue, converged)``; on non-convergence the last
    iterate is returned and a :class:`ConvergenceWarning` is emitted.
    """
    v = rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    eig = None
    for _ in range(n_iter):
        hv = hvp_fn(v)
        new = float(np.sum(v * hv))
        norm = np.linalg.norm(hv)
        if norm == 0.0:
            return 0.0, True
        v = hv / norm
        if eig is not None and abs(new - eig) < tol * max(abs(new), 1e-12):
            return new, True
        eig = new
    warnings.warn(f"power iteration did not converge in {n_iter} steps", ConvergenceWarning, stacklevel=2)
    return eig, False
