"""Box-projected BFGS ascent with a backtracking Armijo line search."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EstimationError, ModeSearchFailure, NonFiniteLikelihood


@dataclass
class AscentResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    inv_hessian: np.ndarray
    iterations: int
    converged: bool
    history: list = field(default_factory=list)
    message: str = ""


def bfgs_maximize(fun, x0, lower=None, inv_hessian=None, max_iter=200, tol=1e-7,
                  gtol=None, max_step=5.0, check=None, local=None) -> AscentResult:
    """Maximize ``fun`` with BFGS.

    Parameters
    ----------
    fun : callable
        ``fun(x) -> (value, gradient)``. It may raise
        :class:`NonFiniteLikelihood` or :class:`ModeSearchFailure`; such a
        trial point is treated as a failed line-search step.
    lower : array_like, optional
        Lower bounds (``-inf`` for free coordinates). Trial points are
        projected onto the box and bound-active coordinates are frozen.
    inv_hessian : ndarray, optional
        Initial approximation to the inverse of the negative Hessian.
    tol, gtol : float
        Converged when the relative change in ``value`` is below ``tol`` and
        the projected gradient max-norm is below ``gtol`` (default ``10*tol``).
    max_step : float
        Cap on the max-norm of a full step.
    check : callable, optional
        Called with every accepted point; may raise to abort.
    local : callable, optional
        Surrogate ``local(x) -> (value, gradient)`` that agrees with ``fun``
        at the point ``fun`` was last called with and whose gradient is exact
        for itself. When a full ``fun`` step fails the Armijo test, ``fun``
        is re-anchored at the current point and the line search continues on
        the surrogate; ``fun`` is then re-evaluated at the accepted point.
    """
    x = np.array(x0, dtype=float)
    n = x.size
    lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    x = np.maximum(x, lower)
    gtol = 10 * tol if gtol is None else gtol
    H = np.eye(n) if inv_hessian is None else np.array(inv_hessian, dtype=float)
    f, g = fun(x)
    history = [f]

    def projected(x, g):
        pg = g.copy()
        pg[(x <= lower) & (g < 0)] = 0.0
        return pg

    pg = projected(x, g)
    if np.max(np.abs(pg), initial=0.0) < gtol:
        return AscentResult(x, f, g, H, 0, True, history, "initial point is stationary")

    for it in range(1, max_iter + 1):
        active = pg != g
        d = H @ pg
        d[active] = 0.0
        slope = pg @ d
        if not slope > 0:
            H = np.eye(n) * (H.diagonal().mean() if n else 1.0)
            d = H @ pg
            slope = pg @ d
        big = np.max(np.abs(d))
        if big > max_step:
            d *= max_step / big
        t = 1.0
        trial = fun
        while True:
            xn = np.maximum(x + t * d, lower)
            try:
                fn, gn = trial(xn)
            except (NonFiniteLikelihood, ModeSearchFailure, FloatingPointError):
                fn, gn = -np.inf, None
            if fn >= f + 1e-4 * (g @ (xn - x)) and fn >= f:
                break
            if trial is fun and local is not None:
                # the surrogate is consistent with g; search along d with it
                fun(x)
                trial = local
                continue
            t *= 0.5
            if t < 1e-12:
                # no ascent possible along d; stationary to working precision
                ok = np.max(np.abs(pg)) < 1e3 * gtol
                return AscentResult(x, f, g, H, it, ok, history,
                                    "line search failed")
        if check is not None:
            check(xn)
        if trial is not fun:
            fn, gn = fun(xn)
        s = xn - x
        yv = g - gn
        sy = s @ yv
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            rho = 1.0 / sy
            Hy = H @ yv
            H = (H - rho * (np.outer(s, Hy) + np.outer(Hy, s))
                 + (rho * rho * (yv @ Hy) + rho) * np.outer(s, s))
        rel = abs(fn - f) / max(1.0, abs(fn))
        x, f, g = xn, fn, gn
        history.append(f)
        pg = projected(x, g)
        if rel < tol and np.max(np.abs(pg), initial=0.0) < gtol:
            return AscentResult(x, f, g, H, it, True, history, "converged")
    return AscentResult(x, f, g, H, max_iter, False, history, "iteration limit reached")


def fd_jacobian(grad, x, step=1e-4):
    """Central-difference Jacobian of a gradient function, symmetrized."""
    x = np.asarray(x, dtype=float)
    n = x.size
    J = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        J[:, j] = (grad(x + e) - grad(x - e)) / (2 * step)
    return 0.5 * (J + J.T)


__all__ = ["AscentResult", "bfgs_maximize", "fd_jacobian", "EstimationError"]
