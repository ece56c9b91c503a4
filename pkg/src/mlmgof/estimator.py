"""Maximum-likelihood fitting of mixed-effects logistic models.

The marginal likelihood is integrated by nested adaptive Gauss-Hermite
quadrature (:mod:`mlmgof.likelihood`) and maximized by BFGS over the fixed
effects and an unconstrained parameterization of each level's covariance:
the lower-triangular factor ``L`` of ``Omega = L L^T`` with log-transformed
diagonal. Under the ``independent`` structure the off-diagonal entries are
not parameters at all.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import ClusteredDataset, DesignMatrices, ModelSpec, build_design
from .errors import (NoConvergence, SeparationDetected, SingularInformation)
from .likelihood import NestedQuadrature
from .quadrature import QuadratureRule
from .optimize import bfgs_maximize, fd_jacobian

LOG_SD_FLOOR = -8.0
SEPARATION_BOUND = 30.0
DEFAULT_NODES = 7


@dataclass(frozen=True)
class FitOptions:
    """Keyword bundle for :func:`fit`, passed around by the GOF test."""

    nodes: int = DEFAULT_NODES
    max_iter: int = 300
    tol: float = 1e-8


class _Layout:
    """Index bookkeeping for theta = [beta, level-2 factor, level-3 factor]."""

    def __init__(self, p, d2, cov2, d3, cov3):
        self.p = p
        self.levels = []
        pos = p
        lower = [-np.inf] * p
        for d, cov in ((d2, cov2), (d3, cov3)):
            entries = []
            for a in range(d):
                for b in range(0 if cov == "unstructured" else a, a + 1):
                    entries.append((a, b))
            idx = np.arange(pos, pos + len(entries))
            self.levels.append((d, entries, idx))
            lower += [LOG_SD_FLOOR if a == b else -np.inf for a, b in entries]
            pos += len(entries)
        self.size = pos
        self.lower = np.array(lower)

    def factors(self, theta):
        out = []
        for d, entries, idx in self.levels:
            L = np.zeros((d, d))
            for (a, b), j in zip(entries, idx):
                L[a, b] = np.exp(theta[j]) if a == b else theta[j]
            out.append(L)
        return out

    def gradient(self, theta, ev):
        g = np.empty(self.size)
        g[:self.p] = ev.grad_beta
        for (d, entries, idx), gL in zip(self.levels, (ev.grad_L2, ev.grad_L3)):
            for (a, b), j in zip(entries, idx):
                g[j] = gL[a, b] * np.exp(theta[j]) if a == b else gL[a, b]
        return g

    def diag_index(self):
        return np.array([j for _, entries, idx in self.levels
                         for (a, b), j in zip(entries, idx) if a == b], dtype=int)


@dataclass(frozen=True)
class LevelVariance:
    """Covariance of one level's random effects."""

    names: tuple
    cov: np.ndarray
    structure: str
    boundary: tuple

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    @property
    def corr(self) -> np.ndarray:
        sd = self.sd
        with np.errstate(invalid="ignore", divide="ignore"):
            c = self.cov / np.outer(sd, sd)
        c[~np.isfinite(c)] = 0.0
        np.fill_diagonal(c, 1.0)
        return np.clip(c, -1.0, 1.0)


@dataclass(frozen=True)
class VarianceComponents:
    level2: LevelVariance | None
    level3: LevelVariance | None


@dataclass(frozen=True)
class FittedModel:
    """Result of :func:`fit`.

    ``eb`` maps ``"level2"`` / ``"level3"`` to arrays of posterior-mode
    random effects, one row per cluster code. ``theta_cov`` is the inverse
    observed information over the unconstrained parameters; rows of
    parameters held at the variance floor are NaN.
    """

    beta_hat: np.ndarray
    vc: VarianceComponents
    loglik: float
    fixed_cov: np.ndarray | None
    eb: dict
    converged: bool
    iterations: int
    names: tuple
    theta: np.ndarray
    theta_cov: np.ndarray | None
    spec: ModelSpec
    nodes: int
    inv_hessian: np.ndarray = field(repr=False, default=None)
    history: tuple = field(repr=False, default=())

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.fixed_cov))

    def coef(self) -> dict:
        return dict(zip(self.names, self.beta_hat))


def _plain_start(X, y):
    """Crude logistic starting point and inverse information at it."""
    ybar = np.clip(y.mean(), 0.01, 0.99)
    beta = np.zeros(X.shape[1])
    beta[0] = np.log(ybar / (1 - ybar))
    p = expit(X @ beta)
    info = X.T @ (X * (p * (1 - p))[:, None])
    return beta, np.linalg.pinv(info)


def fit(ds: ClusteredDataset, spec: ModelSpec, nodes: int = DEFAULT_NODES,
        max_iter: int = 300, tol: float = 1e-8, start=None, inv_hessian=None,
        covariance: bool = True, strict: bool = True) -> FittedModel:
    """Fit the model by maximizing the quadrature marginal likelihood.

    Parameters
    ----------
    ds, spec
        Data and model; all spec columns must exist in ``ds``.
    nodes : int
        Quadrature nodes per random-effect dimension.
    max_iter, tol
        BFGS limits. Convergence needs a relative log-likelihood change below
        ``tol`` and a gradient max-norm below ``10 * tol``.
    start, inv_hessian : ndarray, optional
        Warm start for the unconstrained parameter vector and the matching
        BFGS inverse-Hessian approximation.
    covariance : bool
        Compute ``fixed_cov`` from a finite-differenced observed information.
    strict : bool
        Raise :class:`NoConvergence` instead of returning an unconverged fit.

    Raises
    ------
    SeparationDetected
        A fixed effect exceeded 30 in absolute value.
    SingularInformation
        The observed information is not positive definite.
    NoConvergence
        The iteration limit was reached (``strict`` only).
    """
    design = build_design(ds, spec)
    y = np.asarray(ds.y, dtype=float)
    engine = NestedQuadrature(design, y, nodes)
    lv2 = spec.random.level2
    lv3 = spec.random.level3
    cov2 = lv2.covariance if lv2 is not None else "independent"
    cov3 = lv3.covariance if lv3 is not None else "independent"
    layout = _Layout(design.X.shape[1], engine.d2, cov2, engine.d3, cov3)
    p = layout.p

    anchor = {}

    def objective(theta):
        L2, L3 = layout.factors(theta)
        anchor["placement"] = engine.place(theta[:p], L2, L3)
        anchor["theta"] = theta.copy()
        ev = engine.evaluate(theta[:p], L2, L3, placement=anchor["placement"])
        return ev.loglik, layout.gradient(theta, ev)

    def frozen(theta):
        L2, L3 = layout.factors(theta)
        ev = engine.evaluate(theta[:p], L2, L3, placement=anchor["placement"])
        return ev.loglik, layout.gradient(theta, ev)

    def check(theta):
        if np.max(np.abs(theta[:p])) > SEPARATION_BOUND:
            raise SeparationDetected(
                f"|beta| exceeded {SEPARATION_BOUND:g}; data look separated")

    if start is None:
        X = np.asarray(design.X)
        beta0, binv = _plain_start(X, y)
        if layout.size > p:
            # fixed-effects-only pre-fit gives the mixed model its start
            plain = bfgs_maximize(lambda b: _plain_objective(engine, b), beta0,
                                  inv_hessian=binv, max_iter=max_iter, tol=1e-6,
                                  check=check)
            beta0 = plain.x
            binv = plain.inv_hessian
        theta0 = np.zeros(layout.size)
        theta0[:p] = beta0
        theta0[layout.diag_index()] = np.log(0.5)
        H0 = np.zeros((layout.size, layout.size))
        H0[:p, :p] = 1.5 * binv if layout.size > p else binv
        for (d, entries, idx), ncl in zip(layout.levels, (design.n_level2, design.n_level3)):
            for j in idx:
                H0[j, j] = 1.0 / max(ncl, 1)
    else:
        theta0 = np.asarray(start, dtype=float)
        H0 = inv_hessian
    check(theta0)

    mixed = layout.size > p
    res = bfgs_maximize(objective, theta0, lower=layout.lower, inv_hessian=H0,
                        max_iter=max_iter, tol=tol, check=check,
                        local=frozen if mixed else None)
    if not res.converged and strict:
        raise NoConvergence(f"no convergence after {res.iterations} iterations "
                            f"({res.message})")
    theta = res.x
    L2, L3 = layout.factors(theta)
    beta = theta[:p]

    floor = layout.lower > -np.inf
    at_floor = floor & (theta <= LOG_SD_FLOOR + 1e-6)
    theta_cov = fixed_cov = None
    if covariance:
        # nodes stay placed at the optimum; moving them with the 1e-4
        # perturbations changes the information only at quadrature-error level
        if mixed and not np.array_equal(anchor.get("theta"), theta):
            objective(theta)
        theta_cov = _observed_covariance(frozen if mixed else objective,
                                         theta, at_floor, floor)
        fixed_cov = theta_cov[:p, :p].copy()

    z3, z2 = engine.modes(beta, L2, L3)
    eb = {"level2": engine.unpad_level2(z2) @ L2.T,
          "level3": engine.unpad_level3(z3) @ L3.T}

    vcs = []
    for lv, (d, entries, idx), L in zip((lv2, lv3), layout.levels, (L2, L3)):
        if d == 0:
            vcs.append(None)
            continue
        bnd = tuple(bool(at_floor[j]) for (a, b), j in zip(entries, idx) if a == b)
        vcs.append(LevelVariance(lv.names, L @ L.T, lv.covariance, bnd))
    return FittedModel(beta, VarianceComponents(*vcs), res.f, fixed_cov, eb,
                       res.converged, res.iterations, design.x_names, theta,
                       theta_cov, spec, engine.nodes, res.inv_hessian,
                       tuple(res.history))


def _plain_objective(engine, beta):
    ev = engine._fixed_only(engine.X @ beta + engine.pad_offset, True)
    return ev.loglik, ev.grad_beta


def _observed_covariance(objective, theta, at_floor, is_vc, step=1e-4):
    """Inverse of the finite-differenced observed information.

    Parameters held at the variance floor are excluded (their rows and
    columns are NaN). If the information over the remaining parameters is
    not positive definite, variance parameters close to the floor are
    dropped as well before giving up.
    """
    n = theta.size

    def attempt(keep):
        idx = np.flatnonzero(keep)

        def grad_sub(v):
            t = theta.copy()
            t[idx] = v
            return objective(t)[1][idx]

        info = -fd_jacobian(grad_sub, theta[idx], step)
        try:
            R = np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            return None
        Rinv = np.linalg.solve(R, np.eye(len(idx)))
        cov = np.full((n, n), np.nan)
        cov[np.ix_(idx, idx)] = Rinv.T @ Rinv
        return cov

    keep = ~at_floor
    cov = attempt(keep)
    if cov is None:
        keep &= ~(is_vc & (theta < -2.0))
        cov = attempt(keep)
    if cov is None:
        raise SingularInformation("observed information is not positive definite")
    return cov


def predict_conditional(fm: FittedModel, ds: ClusteredDataset, spec: ModelSpec | None = None):
    """Conditional probabilities ``expit(x'beta + z'u)`` using EB modes."""
    design = build_design(ds, spec or fm.spec)
    return predict_from_design(fm, design)


def predict_from_design(fm: FittedModel, design: DesignMatrices):
    eta = np.asarray(design.X) @ fm.beta_hat
    u2, u3 = fm.eb["level2"], fm.eb["level3"]
    if design.Z2.shape[1]:
        eta = eta + np.einsum("nd,nd->n", design.Z2, u2[design.level2])
    if design.Z3.shape[1]:
        eta = eta + np.einsum("nd,nd->n", design.Z3, u3[design.level3])
    return expit(eta)


def _params(fm_or_params):
    if isinstance(fm_or_params, FittedModel):
        vc = fm_or_params.vc
        om2 = vc.level2.cov if vc.level2 is not None else np.zeros((0, 0))
        om3 = vc.level3.cov if vc.level3 is not None else np.zeros((0, 0))
        return fm_or_params.beta_hat, om2, om3
    beta, om2, om3 = fm_or_params
    return np.asarray(beta, dtype=float), om2, om3


def marginal_loglik(fm_or_params, design: DesignMatrices, y,
                    rule: int | QuadratureRule = DEFAULT_NODES) -> float:
    """Quadrature marginal log-likelihood at ``(beta, Omega2, Omega3)``.

    Parameters
    ----------
    fm_or_params : FittedModel or tuple
        A fit, or ``(beta, Omega2, Omega3)`` with covariance matrices sized
        to the design's Z blocks (``np.zeros((0, 0))`` for an absent level).
    rule : int or QuadratureRule
        Nodes per random-effect dimension.
    """
    beta, om2, om3 = _params(fm_or_params)
    nodes = len(rule) if isinstance(rule, QuadratureRule) else rule
    engine = NestedQuadrature(design, y, nodes)
    return engine.evaluate(beta, _factor(om2), _factor(om3), grad=False).loglik


def eb_modes(fm_or_params, design: DesignMatrices, y) -> dict:
    """Posterior modes of the random effects, one row per cluster code.

    Level-2 modes are taken jointly with the level-3 mode of their family.
    Returns ``{"level2": (n2, d2), "level3": (n3, d3)}`` arrays.
    """
    beta, om2, om3 = _params(fm_or_params)
    engine = NestedQuadrature(design, y, 1)
    L2, L3 = _factor(om2), _factor(om3)
    z3, z2 = engine.modes(beta, L2, L3)
    return {"level2": engine.unpad_level2(z2) @ L2.T,
            "level3": engine.unpad_level3(z3) @ L3.T}


def _factor(om):
    """Lower-triangular factor of a PSD matrix, tolerating zero variances."""
    om = np.atleast_2d(np.asarray(om, dtype=float))
    d = om.shape[0]
    if d == 0:
        return np.zeros((0, 0))
    L = np.zeros((d, d))
    for j in range(d):
        v = om[j, j] - L[j, :j] @ L[j, :j]
        L[j, j] = np.sqrt(max(v, 0.0))
        for i in range(j + 1, d):
            L[i, j] = (om[i, j] - L[i, :j] @ L[j, :j]) / L[j, j] if L[j, j] > 0 else 0.0
    return L
