"""Damped Gauss-Newton least squares.

Small, deterministic solver used for both exponential-kernel fits and
histogram lineshape fits.  Levenberg-style damping: the multiplier grows
by 10 on a rejected step and shrinks by 10 on an accepted one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["GaussNewtonResult", "damped_gauss_newton", "numerical_jacobian"]


@dataclass
class GaussNewtonResult:
    x: np.ndarray
    rms: float
    n_iter: int
    converged: bool
    jacobian: np.ndarray | None = None


def numerical_jacobian(residual: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                       rel_step: float = 1e-7) -> np.ndarray:
    """Forward-difference Jacobian of a residual vector."""
    r0 = residual(x)
    jac = np.empty((r0.size, x.size))
    for j in range(x.size):
        h = rel_step * max(abs(x[j]), 1.0)
        xp = x.copy()
        xp[j] += h
        jac[:, j] = (residual(xp) - r0) / h
    return jac


def damped_gauss_newton(
    residual: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    jacobian: Callable[[np.ndarray], np.ndarray] | None = None,
    *,
    project: Callable[[np.ndarray], np.ndarray] | None = None,
    max_iter: int = 200,
    cost_tol: float = 1e-14,
    step_tol: float = 1e-12,
    damping0: float = 1e-3,
) -> GaussNewtonResult:
    """Minimize ``sum(residual(x)**2)`` from ``x0``.

    ``residual`` must return a real 1-d array (complex data is stacked
    by the caller).  ``project`` is applied to every trial point and can
    enforce simple bounds.  Deterministic: no randomness anywhere.
    """
    x = np.asarray(x0, dtype=float).copy()
    if project is not None:
        x = project(x)
    r = residual(x)
    cost = float(r @ r)
    lam = damping0
    n_done = 0
    converged = False
    jac = None
    for n_done in range(1, max_iter + 1):
        jac = jacobian(x) if jacobian is not None else numerical_jacobian(residual, x)
        g = jac.T @ r
        jtj = jac.T @ jac
        diag = np.diag(jtj).copy()
        diag[diag <= 0.0] = 1.0
        accepted = False
        for _ in range(40):
            try:
                step = np.linalg.solve(jtj + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_try = x + step
            if project is not None:
                x_try = project(x_try)
            r_try = residual(x_try)
            cost_try = float(r_try @ r_try)
            if np.isfinite(cost_try) and cost_try <= cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
        delta_cost = cost - cost_try
        delta_x = float(np.linalg.norm(x_try - x))
        x, r, cost = x_try, r_try, cost_try
        lam = max(lam / 10.0, 1e-14)
        if delta_cost <= cost_tol * max(cost, 1.0) and delta_x <= step_tol * max(float(np.linalg.norm(x)), 1.0):
            converged = True
            break
    rms = float(np.sqrt(cost / r.size))
    return GaussNewtonResult(x=x, rms=rms, n_iter=n_done, converged=converged, jacobian=jac)
