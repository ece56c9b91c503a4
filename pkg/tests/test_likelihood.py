import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import log_expit

from mlmgof.data import LevelEffects, ModelSpec, RandomEffectsSpec, build_design, from_arrays
from mlmgof.estimator import marginal_loglik
from mlmgof.likelihood import NestedQuadrature
from mlmgof.quadrature import gh_rule

EMPTY = np.zeros((0, 0))


def intercept_design(y, groups, x=None):
    cov = {} if x is None else {"x": x}
    ds = from_arrays(y, groups, None, cov)
    spec = ModelSpec(tuple(cov), RandomEffectsSpec(LevelEffects(True, ())))
    return build_design(ds, spec), np.asarray(ds.y)


def bernoulli_ll(y, eta):
    return np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta))


def test_zero_variance_is_plain_logistic(small_two_level):
    ds, spec = small_two_level
    d = build_design(ds, spec)
    beta = np.array([0.3, -0.2, 0.5])
    got = marginal_loglik((beta, np.zeros((2, 2)), EMPTY), d, ds.y)
    assert got == pytest.approx(bernoulli_ll(np.asarray(ds.y), d.X @ beta), abs=1e-10)


def test_single_success_symmetric_integral():
    d, y = intercept_design([1, 0], ["a", "b"])
    # E[expit(Z)] = 1/2 by symmetry; the same holds for the y = 0 cluster
    params = (np.zeros(1), [[1.0]], EMPTY)
    assert marginal_loglik(params, d, y, rule=30) == pytest.approx(2 * np.log(0.5), abs=1e-12)
    assert marginal_loglik(params, d, y) == pytest.approx(2 * np.log(0.5), abs=1e-5)


def trapezoid_cluster(y, eta, sigma, half_width=12.0, m=200001):
    u = np.linspace(-half_width * sigma, half_width * sigma, m)
    f = np.exp(sum(yi * log_expit(ei + u) + (1 - yi) * log_expit(-(ei + u))
                   for yi, ei in zip(y, eta)))
    dens = np.exp(-0.5 * (u / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
    return np.log(np.trapezoid(f * dens, u))


def test_two_observation_cluster_matches_trapezoid():
    y = np.array([1.0, 0.0, 1.0, 1.0])
    x = np.array([0.4, -1.1, 0.2, 2.0])
    d, yy = intercept_design(y, ["a", "a", "b", "b"], x)
    beta = np.array([-0.3, 0.8])
    sigma = 0.7
    want = sum(trapezoid_cluster(y[s], beta[0] + beta[1] * x[s], sigma)
               for s in (slice(0, 2), slice(2, 4)))
    got = marginal_loglik((beta, [[sigma ** 2]], EMPTY), d, yy, rule=gh_rule(15))
    assert got == pytest.approx(want, abs=1e-6)


def test_three_level_against_nested_brute_force():
    rng = np.random.default_rng(3)
    l3 = np.repeat([0, 1], 4)
    l2 = np.repeat([0, 1, 2, 3], 2)
    x = rng.normal(size=8)
    y = np.array([1, 0, 1, 1, 0, 0, 1, 0.0])
    ds = from_arrays(y, l2, l3, {"x": x})
    spec = ModelSpec(("x",), RandomEffectsSpec(LevelEffects(True, ()), LevelEffects(True, ())))
    d = build_design(ds, spec)
    beta = np.array([0.2, -0.6])
    s2, s3 = 0.8, 0.6
    want = 0.0
    for f in (0, 1):
        def outer(v):
            prod = 1.0
            for k in np.unique(l2[l3 == f]):
                idx = l2 == k
                inner = integrate.quad(
                    lambda u: np.exp(bernoulli_ll(y[idx], beta[0] + beta[1] * x[idx] + u + v))
                    * np.exp(-0.5 * (u / s2) ** 2) / (s2 * np.sqrt(2 * np.pi)), -10, 10,
                    epsabs=1e-13)[0]
                prod *= inner
            return prod * np.exp(-0.5 * (v / s3) ** 2) / (s3 * np.sqrt(2 * np.pi))
        want += np.log(integrate.quad(outer, -8, 8, epsabs=1e-13)[0])
    got = marginal_loglik((beta, [[s2 ** 2]], [[s3 ** 2]]), d, y, rule=15)
    assert got == pytest.approx(want, abs=1e-8)


def _random_points(d, n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        beta = rng.normal([-1, 0.5, 0.3], 0.3)
        L2 = np.diag(rng.uniform(0.2, 1.0, d.Z2.shape[1]))
        L3 = np.diag(rng.uniform(0.2, 1.0, d.Z3.shape[1]))
        yield beta, L2, L3


@pytest.mark.parametrize("fixture", ["small_two_level", "small_three_level"])
def test_score_matches_finite_differences(fixture, request):
    ds, spec = request.getfixturevalue(fixture)
    d = build_design(ds, spec)
    eng = NestedQuadrature(d, ds.y, 7)
    h = 1e-5
    for beta, L2, L3 in _random_points(d, 10, 0):
        g = eng.evaluate(beta, L2, L3).grad_beta
        fd = np.array([(eng.evaluate(beta + e, L2, L3, grad=False).loglik
                        - eng.evaluate(beta - e, L2, L3, grad=False).loglik) / (2 * h)
                       for e in np.eye(3) * h])
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


def test_score_is_exact_for_fixed_node_placement(small_three_level):
    ds, spec = small_three_level
    d = build_design(ds, spec)
    eng = NestedQuadrature(d, ds.y, 5)
    h = 1e-5
    for beta, L2, L3 in _random_points(d, 3, 1):
        pl = eng.place(beta, L2, L3)
        ev = eng.evaluate(beta, L2, L3, placement=pl)
        fd = [(eng.evaluate(beta + e, L2, L3, False, pl).loglik
               - eng.evaluate(beta - e, L2, L3, False, pl).loglik) / (2 * h) for e in np.eye(3) * h]
        np.testing.assert_allclose(ev.grad_beta, fd, rtol=1e-6, atol=1e-6)
        for a, b in [(0, 0), (1, 1)]:
            E = np.zeros_like(L2)
            E[a, b] = h
            fd = (eng.evaluate(beta, L2 + E, L3, False, pl).loglik
                  - eng.evaluate(beta, L2 - E, L3, False, pl).loglik) / (2 * h)
            assert ev.grad_L2[a, b] == pytest.approx(fd, rel=1e-6, abs=1e-6)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_invariant_to_cluster_and_row_order(seed):
    rng = np.random.default_rng(seed)
    J, K, n = 3, 2, 4
    N = J * K * n
    l3 = np.repeat(np.arange(J), K * n)
    l2 = np.repeat(np.arange(J * K), n)
    x1 = rng.normal(size=N)
    x2 = (rng.random(N) < 0.5).astype(float)
    y = (rng.random(N) < 0.4).astype(float)
    spec = ModelSpec(("x1", "x2"), RandomEffectsSpec(LevelEffects(True, ("x2",)),
                                                     LevelEffects(True, ())))
    params = (np.array([-0.5, 0.4, 0.2]), np.diag([0.5, 0.3]), [[0.4]])
    base = marginal_loglik(params, build_design(from_arrays(y, l2, l3, {"x1": x1, "x2": x2}), spec), y, 5)
    perm = rng.permutation(N)
    ds = from_arrays(y[perm], l2[perm], l3[perm], {"x1": x1[perm], "x2": x2[perm]})
    got = marginal_loglik(params, build_design(ds, spec), y[perm], 5)
    assert got == pytest.approx(base, abs=1e-9)
