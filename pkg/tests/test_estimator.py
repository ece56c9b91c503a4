import dataclasses

import numpy as np
import pytest
from scipy.special import expit, log_expit

from mlmgof.data import LevelEffects, ModelSpec, RandomEffectsSpec, build_design, from_arrays
from mlmgof.errors import SeparationDetected
from mlmgof.estimator import eb_modes, fit, predict_conditional
from mlmgof.simlab import Scenario, generate_dataset

EMPTY = np.zeros((0, 0))
PLAIN = ModelSpec(("x1", "x2"))


def irls(X, y, tol=1e-14, max_iter=100):
    """Newton-Raphson for plain logistic regression, written out by hand."""
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        p = expit(X @ beta)
        w = p * (1 - p)
        z = X @ beta + (y - p) / w
        new = np.linalg.solve(X.T @ (X * w[:, None]), X.T @ (w * z))
        if np.max(np.abs(new - beta)) < tol:
            return new
        beta = new
    return beta


def plain_data(seed, n=400):
    rng = np.random.default_rng(seed)
    x1 = rng.uniform(-3, 3, n)
    x2 = (rng.random(n) < 0.5).astype(float)
    y = (rng.random(n) < expit(-1 + 0.5 * x1 + 0.3 * x2)).astype(float)
    return from_arrays(y, np.arange(n) // 10, None, {"x1": x1, "x2": x2})


@pytest.mark.parametrize("seed", range(3))
def test_plain_fit_matches_irls(seed):
    ds = plain_data(seed)
    fm = fit(ds, PLAIN)
    X = build_design(ds, PLAIN).X
    np.testing.assert_allclose(fm.beta_hat, irls(X, np.asarray(ds.y)), atol=1e-6)
    # observed information of the plain model is X'WX
    p = expit(X @ fm.beta_hat)
    info = X.T @ (X * (p * (1 - p))[:, None])
    np.testing.assert_allclose(fm.fixed_cov, np.linalg.inv(info), rtol=1e-4)
    assert fm.vc.level2 is None and fm.vc.level3 is None


def test_fit_reports_symmetric_covariance(small_two_level):
    ds, spec = small_two_level
    fm = fit(ds, spec)
    assert fm.converged
    np.testing.assert_allclose(fm.fixed_cov, fm.fixed_cov.T, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(fm.fixed_cov) > 0)
    assert fm.vc.level2.cov.shape == (2, 2)
    assert fm.eb["level2"].shape == (ds.n_level2, 2)


def test_symmetric_data_gives_zero_intercept():
    rng = np.random.default_rng(11)
    n, m = 30, 6
    x1 = rng.uniform(-3, 3, (n, m))
    y = (rng.random((n, m)) < expit(0.5 * x1 + rng.normal(0, 0.8, (n, 1)))).astype(float)
    # every row gets a mirror (-x1, 1 - y) in the same cluster
    X1 = np.hstack([x1, -x1]).ravel()
    Y = np.hstack([y, 1 - y]).ravel()
    ids = np.repeat(np.arange(n), 2 * m)
    ds = from_arrays(Y, ids, None, {"x1": X1})
    fm = fit(ds, ModelSpec(("x1",), RandomEffectsSpec(LevelEffects(True, ()))))
    assert abs(fm.beta_hat[0]) < 1e-4
    assert fm.beta_hat[1] > 0


def test_separation_is_detected():
    x = np.linspace(-2, 2, 40)
    ds = from_arrays((x > 0).astype(float), np.arange(40) // 4, None, {"x": x})
    with pytest.raises(SeparationDetected):
        fit(ds, ModelSpec(("x",)))


def grid_mode(y, eta, sigma):
    u = np.linspace(-6 * sigma, 6 * sigma, 1_200_001)
    logpost = -0.5 * (u / sigma) ** 2
    for yi, ei in zip(y, eta):
        logpost += yi * log_expit(ei + u) + (1 - yi) * log_expit(-(ei + u))
    return u[np.argmax(logpost)]


def test_eb_mode_matches_grid_search():
    rng = np.random.default_rng(2)
    x = rng.normal(size=16)
    y = np.array([1, 1, 0, 1, 1, 1, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0.0])
    ids = np.repeat([0, 1], 8)
    ds = from_arrays(y, ids, None, {"x": x})
    d = build_design(ds, ModelSpec(("x",), RandomEffectsSpec(LevelEffects(True, ()))))
    beta = np.array([-0.2, 0.7])
    sigma = 0.9
    got = eb_modes((beta, [[sigma ** 2]], EMPTY), d, y)["level2"][:, 0]
    for c in (0, 1):
        s = ids == c
        assert got[c] == pytest.approx(grid_mode(y[s], beta[0] + beta[1] * x[s], sigma), abs=1e-4)


def test_eb_modes_degenerate_and_symmetric_cases():
    y = np.array([1, 0, 1, 0, 1, 1, 1, 0.0])
    ds = from_arrays(y, np.repeat([0, 1], 4))
    d = build_design(ds, ModelSpec((), RandomEffectsSpec(LevelEffects(True, ()))))
    assert np.all(eb_modes((np.zeros(1), [[0.0]], EMPTY), d, y)["level2"] == 0)
    modes = eb_modes((np.zeros(1), [[1.0]], EMPTY), d, y)["level2"][:, 0]
    assert modes[0] == pytest.approx(0.0, abs=1e-12)
    assert modes[1] > 0


def test_predict_conditional_scalar_cases(small_two_level):
    ds, spec = small_two_level
    fm = fit(ds, spec, covariance=False)
    zero = dataclasses.replace(fm, beta_hat=np.zeros(3),
                               eb={"level2": np.zeros_like(fm.eb["level2"]),
                                   "level3": fm.eb["level3"]})
    np.testing.assert_array_equal(predict_conditional(zero, ds), 0.5)

    probe = from_arrays([0, 1], [0, 1], None, {"x1": [0.0, 0.0], "x2": [0.0, 1.0]})
    eb = np.array([[0.0, 0.0], [0.1, 0.2]])
    m = dataclasses.replace(fm, beta_hat=np.array([-1.0, 0.5, 0.3]),
                            eb={"level2": eb, "level3": np.zeros((1, 0))})
    np.testing.assert_allclose(predict_conditional(m, probe), [0.26894, 0.40131], atol=5e-6)


def test_recovers_generating_betas():
    sc = Scenario("recovery", 1, 50, 10, 50, 0.1)
    ds = generate_dataset(sc, 20240)
    fm = fit(ds, sc.model_spec(), nodes=5, covariance=False)
    np.testing.assert_allclose(fm.beta_hat, [-1.0, 0.5, 0.3], atol=0.1)
