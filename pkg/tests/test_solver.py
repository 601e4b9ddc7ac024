import numpy as np
import pytest
import scipy.sparse as sp

from textvo.errors import SolverFailure
from textvo.solver import (SolverReport, huber_cost, huber_weights,
                           levenberg_marquardt, robust_cost_and_weights)


def test_huber_cost_quadratic_then_linear():
    assert huber_cost(np.array([0.5]), 1.0) == pytest.approx(0.25)
    assert huber_cost(np.array([3.0]), 1.0) == pytest.approx(2 * 3.0 - 1.0)
    # continuous at the knee
    eps = 1e-9
    below = huber_cost(np.array([1.0 - eps]), 1.0)
    above = huber_cost(np.array([1.0 + eps]), 1.0)
    assert abs(below - above) < 1e-7


def test_huber_weights_cap_influence():
    r = np.array([0.1, 1.0, 10.0])
    w = huber_weights(r, 1.0)
    assert np.allclose(w, [1.0, 1.0, 0.1])
    # weighted squared residual equals delta*|r| in the linear regime
    assert w[2] * r[2] ** 2 == pytest.approx(1.0 * 10.0)


def test_robust_cost_none_is_pure_lsq():
    r = np.array([1.0, -2.0])
    c, w = robust_cost_and_weights(r, None)
    assert c == pytest.approx(5.0) and np.all(w == 1.0)


def fit_exponential(noise=0.0, deltas_fn=None, outlier=None, seed=0):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 2, 40)
    true = np.array([1.7, -0.8])
    y = true[0] * np.exp(true[1] * t) + rng.normal(scale=noise, size=t.shape)
    if outlier is not None:
        y[5] = outlier
    def resid(x):
        f = x[0] * np.exp(x[1] * t)
        J = np.stack([np.exp(x[1] * t), x[0] * t * np.exp(x[1] * t)], axis=1)
        return f - y, J
    x, rep = levenberg_marquardt(np.array([1.0, 0.0]), resid,
                                 deltas_fn=deltas_fn, max_iters=50)
    return x, rep, true


def test_lm_converges_on_exponential_fit():
    x, rep, true = fit_exponential()
    assert np.allclose(x, true, atol=1e-8)
    assert rep.converged
    assert rep.final_cost <= rep.initial_cost
    assert rep.cost_history == sorted(rep.cost_history, reverse=True)


def test_lm_huber_resists_outlier():
    x_plain, _, true = fit_exponential(noise=0.01, outlier=50.0)
    x_rob, _, _ = fit_exponential(noise=0.01, outlier=50.0,
                                  deltas_fn=lambda r: 0.05)
    err_plain = np.linalg.norm(x_plain - true)
    err_rob = np.linalg.norm(x_rob - true)
    assert err_rob < 0.05
    assert err_rob < 0.2 * err_plain


def test_lm_already_optimal_stops_quickly():
    def resid(x):
        return x - np.array([2.0, 3.0]), np.eye(2)
    x, rep = levenberg_marquardt(np.array([2.0, 3.0]), resid)
    assert rep.converged and rep.iterations <= 2
    assert rep.final_cost == pytest.approx(0.0, abs=1e-20)


def test_lm_with_retraction_on_circle():
    """Optimize an angle through a retraction instead of raw addition."""
    target = np.array([np.cos(1.1), np.sin(1.1)])
    def resid(phi):
        p = np.array([np.cos(phi[0]), np.sin(phi[0])])
        J = np.array([[-p[1]], [p[0]]])
        return p - target, J
    x, rep = levenberg_marquardt(np.array([0.0]), resid,
                                 retract_fn=lambda x, dx: x + dx)
    assert x[0] == pytest.approx(1.1, abs=1e-8)


def test_lm_sparse_jacobian_matches_dense():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(30, 6))
    b = rng.normal(size=30)
    def dense(x):
        return A @ x - b, A
    def sparse(x):
        return A @ x - b, sp.csr_matrix(A)
    xd, _ = levenberg_marquardt(np.zeros(6), dense, max_iters=50)
    xs, _ = levenberg_marquardt(np.zeros(6), sparse, max_iters=50)
    assert np.allclose(xd, xs, atol=1e-10)
    assert np.allclose(xd, np.linalg.lstsq(A, b, rcond=None)[0], atol=1e-8)


def test_lm_nonfinite_jacobian_raises():
    def resid(x):
        J = np.full((2, 2), np.nan)
        return x - 1.0, J
    with pytest.raises(SolverFailure):
        levenberg_marquardt(np.zeros(2), resid)


def test_lm_respects_iteration_budget():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(50, 8))
    b = rng.normal(size=50)
    def resid(x):
        r = A @ x - b
        return r + 0.01 * r ** 3, A  # deliberately inexact Jacobian
    _, rep = levenberg_marquardt(np.zeros(8), resid, max_iters=3)
    assert rep.iterations <= 3
