"""Marginal likelihood of the nested mixed-effects logistic model.

Random effects are handled in standardized form: ``u = L z`` with
``z ~ N(0, I)`` and ``L`` the lower-triangular factor of the level's
covariance. Parameters then enter only through the linear predictor

    eta = X beta + (Z3 L3) z3[family] + (Z2 L2) z2[subject],

which keeps the score a posterior expectation of ``(y - p) d eta / d theta``.

Integration is nested adaptive Gauss-Hermite quadrature. The outer rule over
level-3 effects is centred at the joint posterior mode of a family and scaled
by the Schur complement of the joint curvature; for every outer node the
level-2 modes and curvatures are recomputed and an inner rule is placed on
each subject.

Rows are held in padded ``(family, subject, row)`` arrays so everything is
vectorised across clusters. Sums run in fixed index order, so results do not
depend on how the caller schedules work.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import _kernels
from .data import DesignMatrices
from .errors import ModeSearchFailure, NonFiniteLikelihood
from .quadrature import tensor_rule

_NEWTON_MAX = 100
_NEWTON_TOL = 1e-9
_HALVINGS = 40


def _softplus(x):
    return np.logaddexp(0.0, x)


def _bern_loglik(y, eta):
    return y * eta - _softplus(eta)


def _loglik_and_residual(sign, eta, want_residual=True):
    """Bernoulli log-likelihood and ``y - p`` with one exponential.

    ``sign`` is ``1 - 2y``; padded rows carry a large negative offset so both
    outputs vanish there.
    """
    s = sign * eta
    e = np.exp(-np.abs(s))
    ll = -(np.maximum(s, 0.0) + np.log1p(e))
    if not want_residual:
        return ll, None
    res = np.where(s >= 0.0, 1.0, e)
    res /= 1.0 + e
    res *= -sign
    return ll, res


def _logsumexp(a):
    m = a.max(axis=-1)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.log(np.exp(a - m[..., None]).sum(axis=-1)) + m


def _solve(A, b):
    """Batched ``A^{-1} b`` for symmetric positive definite ``A``."""
    if A.shape[-1] == 0:
        return np.zeros(b.shape)
    return np.linalg.solve(A, b[..., None])[..., 0]


def _chol_scale(P):
    """Factor ``C`` with ``C C^T = P^{-1}`` and ``log|C|``, for SPD ``P``."""
    d = P.shape[-1]
    if d == 0:
        return np.zeros(P.shape), np.zeros(P.shape[:-2])
    R = np.linalg.cholesky(P)
    eye = np.broadcast_to(np.eye(d), R.shape)
    Rinv = np.linalg.solve(R, eye)
    C = np.swapaxes(Rinv, -1, -2)
    logdet = -np.log(np.diagonal(R, axis1=-2, axis2=-1)).sum(-1)
    return C, logdet


@dataclass(frozen=True)
class Placement:
    """Standardized quadrature nodes and log scale factors for one design.

    ``z3n`` has shape (F, Q3, d3) and ``z2n`` (F, Q3, K, Q2, d2); ``logdet3``
    and ``logdet2`` are the log-determinants of the node scale factors.
    """

    z3n: np.ndarray
    logdet3: np.ndarray
    z2n: np.ndarray
    logdet2: np.ndarray
    z3hat: np.ndarray
    z2hat: np.ndarray


@dataclass
class Evaluation:
    loglik: float
    grad_beta: np.ndarray | None = None
    grad_L2: np.ndarray | None = None
    grad_L3: np.ndarray | None = None
    z2: np.ndarray | None = None
    z3: np.ndarray | None = None


class NestedQuadrature:
    """Marginal log-likelihood, score and posterior modes for one design.

    Parameters
    ----------
    design : DesignMatrices
    y : array_like, shape (N,)
    nodes : int
        Gauss-Hermite nodes per random-effect dimension.
    """

    def __init__(self, design: DesignMatrices, y, nodes: int = 7):
        self.design = design
        self.nodes = int(nodes)
        self.p = design.X.shape[1]
        self.d2 = design.Z2.shape[1]
        self.d3 = design.Z3.shape[1]
        y = np.asarray(y, dtype=float)
        N = len(y)
        S = design.n_level2
        code2 = np.asarray(design.level2)
        if self.d3 > 0:
            fam_of_sub = np.zeros(S, dtype=np.intp)
            fam_of_sub[code2] = np.asarray(design.level3)
            F = design.n_level3
        else:
            fam_of_sub = np.zeros(S, dtype=np.intp)
            F = 1
        subs_per_fam = np.bincount(fam_of_sub, minlength=F)
        order = np.argsort(fam_of_sub, kind="stable")
        start = np.concatenate([[0], np.cumsum(subs_per_fam)[:-1]])
        kpos = np.empty(S, dtype=np.intp)
        kpos[order] = np.arange(S) - start[fam_of_sub[order]]
        rows_per_sub = np.bincount(code2, minlength=S)
        order = np.argsort(code2, kind="stable")
        start = np.concatenate([[0], np.cumsum(rows_per_sub)[:-1]])
        ipos = np.empty(N, dtype=np.intp)
        ipos[order] = np.arange(N) - start[code2[order]]

        K, n = int(subs_per_fam.max()), int(rows_per_sub.max())
        self.F, self.K, self.n = F, K, n
        self.fam_of_sub, self.kpos = fam_of_sub, kpos
        self.index = (fam_of_sub[code2], kpos[code2], ipos)

        def pad(a):
            out = np.zeros((F, K, n) + a.shape[1:])
            out[self.index] = a
            return out

        self.y = pad(y)
        self.mask = pad(np.ones(N))
        self.sign = 1.0 - 2.0 * self.y
        # padded rows: eta -> -inf makes likelihood and residual exactly 0
        self.pad_offset = np.where(self.mask > 0, 0.0, -1e4)
        self.X = pad(np.asarray(design.X, dtype=float))
        self.Z2 = pad(np.asarray(design.Z2, dtype=float))
        self.Z3 = pad(np.asarray(design.Z3, dtype=float))
        self.nrows = np.zeros((F, K), dtype=np.int64)
        self.nrows[fam_of_sub, kpos] = rows_per_sub
        self.rule2 = tensor_rule(self.nodes, self.d2)
        self.rule3 = tensor_rule(self.nodes, self.d3)

    # -- plain logistic path --------------------------------------------

    def _fixed_only(self, eta, grad):
        ll = float(np.sum(self.mask * _bern_loglik(self.y, eta)))
        if not np.isfinite(ll):
            raise NonFiniteLikelihood("log-likelihood is not finite")
        ev = Evaluation(ll, z2=np.zeros((self.F, self.K, 0)), z3=np.zeros((self.F, 0)))
        if grad:
            r = self.mask * (self.y - expit(eta))
            ev.grad_beta = np.einsum("fki,fkip->p", r, self.X)
            ev.grad_L2 = np.zeros((0, 0))
            ev.grad_L3 = np.zeros((0, 0))
        return ev

    # -- mode searches -----------------------------------------------------

    def _subject_modes(self, off, B2, z):
        """Conditional level-2 modes given offsets ``off`` (F, Q3, K, n).

        Returns the modes and the posterior precision at the mode.
        """
        z, P, status = _kernels.subject_modes(
            np.ascontiguousarray(off), np.ascontiguousarray(B2), self.sign,
            self.nrows, np.ascontiguousarray(z, dtype=float), _NEWTON_TOL,
            _NEWTON_MAX, _HALVINGS)
        if status:
            raise ModeSearchFailure("level-2 mode search failed")
        return z, P

    def _joint_modes(self, eta0, B2, B3, z3, z2):
        """Joint posterior mode of (z3, z2) per family by block Newton."""
        y, m = self.y, self.mask
        I2, I3 = np.eye(self.d2), np.eye(self.d3)

        def objective(z3, z2):
            eta = (eta0 + np.einsum("fknd,fd->fkn", B3, z3)
                   + np.einsum("fknd,fkd->fkn", B2, z2))
            h = (np.sum(m * _bern_loglik(y, eta), axis=(1, 2))
                 - 0.5 * np.sum(z3 * z3, axis=-1) - 0.5 * np.sum(z2 * z2, axis=(1, 2)))
            return eta, h

        eta, h = objective(z3, z2)
        for _ in range(_NEWTON_MAX):
            p = expit(eta)
            r = m * (y - p)
            w = m * p * (1 - p)
            g3 = np.einsum("fkn,fknd->fd", r, B3) - z3
            g2 = np.einsum("fkn,fknd->fkd", r, B2) - z2
            P33 = np.einsum("fkn,fknd,fkne->fde", w, B3, B3) + I3
            P32 = np.einsum("fkn,fknd,fkne->fkde", w, B3, B2)
            P22 = np.einsum("fkn,fknd,fkne->fkde", w, B2, B2) + I2
            if self.d2:
                P22inv_P23 = np.linalg.solve(P22, np.swapaxes(P32, -1, -2))
            else:
                P22inv_P23 = np.zeros((self.F, self.K, 0, self.d3))
            P22inv_g2 = _solve(P22, g2)
            S = P33 - np.einsum("fkde,fkeg->fdg", P32, P22inv_P23)
            s3 = _solve(S, g3 - np.einsum("fkde,fke->fd", P32, P22inv_g2))
            s2 = P22inv_g2 - np.einsum("fked,fd->fke", P22inv_P23, s3)
            if max(np.max(np.abs(s3)), np.max(np.abs(s2), initial=0.0)) < _NEWTON_TOL:
                return z3, z2, S, P22, P22inv_P23
            t = np.ones(self.F)
            for _ in range(_HALVINGS):
                n3 = z3 + t[:, None] * s3
                n2 = z2 + t[:, None, None] * s2
                eta_new, h_new = objective(n3, n2)
                bad = ~(h_new >= h - 1e-12 * (1 + np.abs(h)))
                if not bad.any():
                    break
                t = np.where(bad, 0.5 * t, t)
            else:
                raise ModeSearchFailure("joint mode search failed to ascend")
            z3, z2, eta, h = n3, n2, eta_new, h_new
        raise ModeSearchFailure("joint mode search did not converge")

    # -- public API -----------------------------------------------------------

    def modes(self, beta, L2, L3):
        """Standardized posterior modes ``(z3 (F, d3), z2 (F, K, d2))``.

        Level-2 modes are conditional on the level-3 modes.
        """
        eta0 = self.X @ np.asarray(beta, dtype=float) + self.pad_offset
        B2 = self.Z2 @ np.asarray(L2, dtype=float).reshape(self.d2, self.d2)
        B3 = self.Z3 @ np.asarray(L3, dtype=float).reshape(self.d3, self.d3)
        z3 = np.zeros((self.F, self.d3))
        z2 = np.zeros((self.F, self.K, self.d2))
        if self.d3:
            z3, z2, *_ = self._joint_modes(eta0, B2, B3, z3, z2)
        elif self.d2:
            z2, _ = self._subject_modes(eta0[:, None], B2, z2[:, None])
            z2 = z2[:, 0]
        return z3, z2

    def _prepare(self, beta, L2, L3):
        beta = np.asarray(beta, dtype=float)
        L2 = np.asarray(L2, dtype=float).reshape(self.d2, self.d2)
        L3 = np.asarray(L3, dtype=float).reshape(self.d3, self.d3)
        return self.X @ beta + self.pad_offset, self.Z2 @ L2, self.Z3 @ L3

    def place(self, beta, L2, L3) -> Placement:
        """Adaptive node placement at the given parameter values."""
        eta0, B2, B3 = self._prepare(beta, L2, L3)
        F, K, d2, d3 = self.F, self.K, self.d2, self.d3
        z2hat = np.zeros((F, K, d2))
        if d3:
            z3hat, z2hat, S, _, P22inv_P23 = self._joint_modes(
                eta0, B2, B3, np.zeros((F, d3)), z2hat)
            C3, logdet3 = _chol_scale(S)
        else:
            z3hat = np.zeros((F, 0))
            P22inv_P23 = np.zeros((F, K, d2, 0))
            C3, logdet3 = np.zeros((F, 0, 0)), np.zeros(F)
        t3, _ = self.rule3
        z3n = z3hat[:, None, :] + np.einsum("fde,qe->fqd", C3, t3)          # (F,Q3,d3)
        t2, _ = self.rule2
        if d2:
            off = eta0[:, None] + np.einsum("fknd,fqd->fqkn", B3, z3n)       # (F,Q3,K,n)
            shift = z3n - z3hat[:, None, :]
            zstart = z2hat[:, None] - np.einsum("fked,fqd->fqke", P22inv_P23, shift)
            z2m, P22 = self._subject_modes(off, B2, zstart)
            C2, logdet2 = _chol_scale(P22)
            if not d3:
                z2hat = z2m[:, 0]
        else:
            z2m = np.zeros((F, len(t3), K, 0))
            C2, logdet2 = np.zeros(z2m.shape + (0,)), np.zeros(z2m.shape[:3])
        z2n = z2m[:, :, :, None, :] + np.einsum("fqkde,re->fqkrd", C2, t2)   # (F,Q3,K,Q2,d2)
        return Placement(z3n, logdet3, z2n, logdet2, z3hat, z2hat)

    def evaluate(self, beta, L2, L3, grad: bool = True,
                 placement: Placement | None = None) -> Evaluation:
        """Log-likelihood and (optionally) its score in ``beta``, ``L2``, ``L3``.

        Nodes are placed adaptively at the given parameters unless a frozen
        ``placement`` is passed. For fixed placement the score is the exact
        gradient of the quadrature sum; with adaptive placement it is the
        quadrature estimate of the posterior-expected complete-data score.
        """
        eta0, B2, B3 = self._prepare(beta, L2, L3)
        if self.d2 == 0 and self.d3 == 0:
            return self._fixed_only(eta0, grad)
        if placement is None:
            placement = self.place(beta, L2, L3)
        d2, d3 = self.d2, self.d3
        z3n, z2n = placement.z3n, placement.z2n
        t2, logw2 = self.rule2
        t3, logw3 = self.rule3

        ll_sub, res = _kernels.node_loglik(eta0, B2, B3, self.sign, self.nrows,
                                           z3n, z2n, grad)
        lv = (logw2 + ll_sub
              - 0.5 * np.sum(z2n * z2n, -1) + 0.5 * np.sum(t2 * t2, -1))    # (F,Q3,K,Q2)
        logI = _logsumexp(lv)                                                 # (F,Q3,K)
        lw = (logw3 + (logI + placement.logdet2).sum(-1)
              - 0.5 * np.sum(z3n * z3n, -1) + 0.5 * np.sum(t3 * t3, -1))     # (F,Q3)
        logLf = _logsumexp(lw)
        loglik = float(np.sum(logLf + placement.logdet3))
        if not np.isfinite(loglik):
            raise NonFiniteLikelihood("marginal log-likelihood is not finite")
        ev = Evaluation(loglik, z2=placement.z2hat, z3=placement.z3hat)
        if not grad:
            return ev

        rho = np.exp(lv - logI[..., None])                                    # (F,Q3,K,Q2)
        pi = np.exp(lw - logLf[:, None])                                      # (F,Q3)
        omega = pi[:, :, None, None] * rho
        row_res, M2, M3 = _kernels.accumulate_score(res, omega, z3n, z2n, self.nrows)
        ev.grad_beta = np.einsum("fkn,fknp->p", row_res, self.X)
        ev.grad_L2 = np.einsum("fkna,fknb->ab", self.Z2, M2)
        ev.grad_L3 = np.einsum("fkna,fknb->ab", self.Z3, M3)
        return ev

    def unpad_level2(self, z2):
        """Map padded ``(F, K, d)`` level-2 values to ``(n_level2, d)``."""
        return z2[self.fam_of_sub, self.kpos]

    def unpad_level3(self, z3):
        if self.d3 == 0:
            return np.zeros((self.design.n_level3, 0))
        return z3
