"""Compiled inner loops for the quadrature likelihood.

Arrays follow the padded ``(family, node3, subject, node2, row)`` layout of
:mod:`mlmgof.likelihood`; ``nrows[f, k]`` is the number of real rows of
subject ``k`` in family ``f`` (rows are packed first).
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def _bern(s):
    # log-likelihood and P(wrong outcome) for signed predictor s = (1-2y) * eta
    ex = math.exp(-abs(s))
    t = 1.0 + ex
    # log(t) rather than log1p(ex): absolute error stays below 1e-16
    ll = -(max(s, 0.0) + math.log(t))
    pr = (1.0 if s >= 0.0 else ex) / t
    return ll, pr


@njit(cache=True)
def node_loglik(eta0, B2, B3, sign, nrows, z3n, z2n, want_res):
    """Per-node subject log-likelihoods and (optionally) row residuals."""
    F, K, n = eta0.shape
    Q3 = z3n.shape[1]
    Q2 = z2n.shape[3]
    d2 = B2.shape[3]
    d3 = B3.shape[3]
    ll = np.zeros((F, Q3, K, Q2))
    if want_res:
        res = np.zeros((F, Q3, K, Q2, n))
    else:
        res = np.zeros((0, 0, 0, 0, 0))
    base = np.empty(n)
    for f in range(F):
        for q in range(Q3):
            for k in range(K):
                m = nrows[f, k]
                for i in range(m):
                    v = eta0[f, k, i]
                    for a in range(d3):
                        v += B3[f, k, i, a] * z3n[f, q, a]
                    base[i] = v
                for r in range(Q2):
                    acc = 0.0
                    for i in range(m):
                        e = base[i]
                        for a in range(d2):
                            e += B2[f, k, i, a] * z2n[f, q, k, r, a]
                        sg = sign[f, k, i]
                        l, pr = _bern(sg * e)
                        acc += l
                        if want_res:
                            res[f, q, k, r, i] = -sg * pr
                    ll[f, q, k, r] = acc
    return ll, res


@njit(cache=True)
def accumulate_score(res, omega, z3n, z2n, nrows):
    """Posterior-weighted residual sums per row.

    Returns ``row`` (F, K, n), ``M2`` (F, K, n, d2) and ``M3`` (F, K, n, d3):
    the weighted residual, and the same multiplied by each standardized
    level-2 / level-3 node coordinate.
    """
    F, Q3, K, Q2, n = res.shape
    d2 = z2n.shape[4]
    d3 = z3n.shape[2]
    row = np.zeros((F, K, n))
    M2 = np.zeros((F, K, n, d2))
    M3 = np.zeros((F, K, n, d3))
    for f in range(F):
        for q in range(Q3):
            for k in range(K):
                m = nrows[f, k]
                for r in range(Q2):
                    w = omega[f, q, k, r]
                    if w == 0.0:
                        continue
                    for i in range(m):
                        v = w * res[f, q, k, r, i]
                        row[f, k, i] += v
                        for b in range(d2):
                            M2[f, k, i, b] += v * z2n[f, q, k, r, b]
                        for b in range(d3):
                            M3[f, k, i, b] += v * z3n[f, q, b]
    return row, M2, M3


@njit(cache=True)
def _chol_solve(P, g, L, out):
    """Solve P x = g for small SPD P via Cholesky; returns False if not PD."""
    d = P.shape[0]
    for j in range(d):
        s = P[j, j]
        for c in range(j):
            s -= L[j, c] * L[j, c]
        if not s > 0.0:
            return False
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, d):
            t = P[i, j]
            for c in range(j):
                t -= L[i, c] * L[j, c]
            L[i, j] = t / L[j, j]
    for i in range(d):
        t = g[i]
        for c in range(i):
            t -= L[i, c] * out[c]
        out[i] = t / L[i, i]
    for i in range(d - 1, -1, -1):
        t = out[i]
        for c in range(i + 1, d):
            t -= L[c, i] * out[c]
        out[i] = t / L[i, i]
    return True


@njit(cache=True)
def _subject_objective(off, B2, sign, m, z):
    d2 = z.shape[0]
    h = 0.0
    for a in range(d2):
        h -= 0.5 * z[a] * z[a]
    for i in range(m):
        e = off[i]
        for a in range(d2):
            e += B2[i, a] * z[a]
        l, _ = _bern(sign[i] * e)
        h += l
    return h


@njit(cache=True)
def subject_modes(off, B2, sign, nrows, z0, tol, max_iter, halvings):
    """Damped Newton for every (family, node3, subject) level-2 mode.

    ``off`` has shape (F, Q3, K, n). Returns modes (F, Q3, K, d2), the
    posterior precision at the mode (F, Q3, K, d2, d2) and a status flag
    (0 = ok, 1 = some search failed).
    """
    F, Q3, K, n = off.shape
    d2 = B2.shape[3]
    Z = z0.copy()
    Pout = np.zeros((F, Q3, K, d2, d2))
    g = np.empty(d2)
    P = np.empty((d2, d2))
    L = np.zeros((d2, d2))
    step = np.empty(d2)
    znew = np.empty(d2)
    status = 0
    for f in range(F):
        for q in range(Q3):
            for k in range(K):
                m = nrows[f, k]
                o = off[f, q, k]
                B = B2[f, k]
                sg = sign[f, k]
                z = Z[f, q, k]
                h = _subject_objective(o, B, sg, m, z)
                done = False
                for it in range(max_iter):
                    for a in range(d2):
                        g[a] = -z[a]
                        for b in range(d2):
                            P[a, b] = 1.0 if a == b else 0.0
                    for i in range(m):
                        e = o[i]
                        for a in range(d2):
                            e += B[i, a] * z[a]
                        _, pr = _bern(sg[i] * e)
                        r = -sg[i] * pr
                        w = pr * (1.0 - pr)
                        for a in range(d2):
                            g[a] += r * B[i, a]
                            for b in range(a + 1):
                                P[a, b] += w * B[i, a] * B[i, b]
                    for a in range(d2):
                        for b in range(a + 1, d2):
                            P[a, b] = P[b, a]
                    if not _chol_solve(P, g, L, step):
                        break
                    big = 0.0
                    for a in range(d2):
                        big = max(big, abs(step[a]))
                    if big < tol:
                        done = True
                        break
                    t = 1.0
                    ok = False
                    for _ in range(halvings):
                        for a in range(d2):
                            znew[a] = z[a] + t * step[a]
                        hn = _subject_objective(o, B, sg, m, znew)
                        if hn >= h - 1e-12 * (1.0 + abs(h)):
                            ok = True
                            break
                        t *= 0.5
                    if not ok:
                        break
                    for a in range(d2):
                        z[a] = znew[a]
                    h = hn
                if done:
                    for a in range(d2):
                        for b in range(d2):
                            Pout[f, q, k, a, b] = P[a, b]
                else:
                    status = 1
    return Z, Pout, status
