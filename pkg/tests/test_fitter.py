from __future__ import annotations

import numpy as np
import pytest

from conftest import make_model
from geemvc.exceptions import IdentifiabilityError
from geemvc.fitter import FitOptions, fit, initialize
from geemvc.model import Cluster, ClusterDataset, ThetaVector, pair_indices
from geemvc.simulate import replicate_dataset, scenario_config, toeplitz_design


@pytest.fixture(scope="module")
def est1():
    cfg = scenario_config("est-I", n_clusters=200)
    data = replicate_dataset(cfg, 3)
    return cfg, data, fit(data, cfg.model)


def test_converged_fit_solves_the_equations(est1):
    cfg, data, res = est1
    assert res.converged
    assert res.update_trace[-1] <= 1e-8
    assert max(res.u_norms) / data.n <= 1e-6
    assert res.theta_hat is res.theta


def test_tanh_shift_fit_solves_the_equations():
    cfg = scenario_config("est-II", n_clusters=200)
    data = replicate_dataset(cfg, 1)
    res = fit(data, cfg.model)
    assert res.converged
    assert max(res.u_norms) / data.n <= 1e-6


def test_cluster_order_does_not_matter(est1):
    cfg, data, res = est1
    shuffled = ClusterDataset(tuple(np.random.default_rng(0).permutation(np.array(data.clusters, dtype=object))))
    again = fit(shuffled, cfg.model)
    np.testing.assert_allclose(again.theta.stacked, res.theta.stacked, atol=1e-10)


def test_exact_roots_are_found_immediately():
    # Residuals of +-sqrt(phi) in every sign pattern make s equal phi and the
    # products z cancel, so theta* solves all three equations exactly.
    theta = ThetaVector([1.0, -0.5], [0.3, 0.2], [0.0])
    X1 = np.column_stack([np.ones(2), [0.5, -1.0]])
    X2 = np.column_stack([np.ones(2), [1.0, -1.0]])
    X3 = np.ones((1, 1))
    root = np.sqrt(np.exp(X2 @ theta.lam))
    clusters = [
        Cluster(i, X1 @ theta.beta + np.array(signs) * root, X1, X2, X3)
        for i, signs in enumerate([(1, 1), (1, -1), (-1, 1), (-1, -1)])
    ]
    data = ClusterDataset(tuple(clusters))
    res = fit(data, make_model("constant-one"), FitOptions(theta0=theta))
    assert res.converged and res.iterations <= 2
    np.testing.assert_allclose(res.theta.stacked, theta.stacked, atol=1e-12)


def test_initial_values():
    rng = np.random.default_rng(4)
    clusters = [Cluster(i, 2.0 + rng.normal(size=3), np.ones((3, 1)), np.ones((3, 1)), np.ones((3, 1)))
                for i in range(30)]
    data = ClusterDataset(tuple(clusters))
    th = initialize(data, make_model("constant-one"))
    y = np.concatenate([c.y for c in clusters])
    assert th.beta[0] == pytest.approx(y.mean(), abs=1e-12)
    assert th.lam[0] == pytest.approx(np.log(np.mean((y - y.mean()) ** 2)), abs=1e-12)
    np.testing.assert_array_equal(th.gamma, [0.0])


def test_rank_deficient_mean_design():
    X = np.column_stack([np.ones(2), np.ones(2)])
    clusters = [Cluster(i, [0.0, 1.0], X, np.ones((2, 1)), np.ones((1, 1))) for i in range(3)]
    with pytest.raises(IdentifiabilityError, match="rank-deficient mean design"):
        initialize(ClusterDataset(tuple(clusters)), make_model("constant-one"))


def test_iteration_cap_reports_non_convergence(est1):
    cfg, data, _ = est1
    res = fit(data, cfg.model, FitOptions(max_iter=2))
    assert not res.converged and res.iterations == 2
    assert len(res.update_trace) == 2


def test_pinned_components_stay_put(est1):
    cfg, data, res = est1
    start = res.theta.replace("scale", res.theta.lam + 0.1)
    pinned = fit(data, cfg.model, FitOptions(theta0=start, free=("corr",)))
    np.testing.assert_array_equal(pinned.theta.beta, start.beta)
    np.testing.assert_array_equal(pinned.theta.lam, start.lam)
    assert pinned.converged


def test_options_validation():
    with pytest.raises(ValueError):
        FitOptions(max_iter=0)
    with pytest.raises(ValueError):
        FitOptions(tol=0.0)
    with pytest.raises(ValueError):
        FitOptions(free=("variance",))


# -- an independently coded constant-variance solver ----------------------------


def _plain_gee_fit(data, n_lags=3, sweeps=200):
    """Toeplitz-lag model with v = 1, identity/log/identity links, written from scratch.

    Uses explicit per-cluster matrices and plain loops only.
    """
    X = np.concatenate([c.X1 for c in data.clusters])
    y = np.concatenate([c.y for c in data.clusters])
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    lam = np.zeros(data.r)
    lam[0] = np.log(np.mean((y - X @ beta) ** 2))
    gamma = np.zeros(n_lags)
    for _ in range(sweeps):
        old = np.concatenate([beta, lam, gamma])
        # mean
        lhs = np.zeros((data.p, data.p))
        rhs = np.zeros(data.p)
        for c in data.clusters:
            phi = np.exp(c.X2 @ lam)
            R = np.eye(c.m)
            for (j, k), g in zip(zip(*pair_indices(c.m)), c.X3 @ gamma):
                R[j, k] = R[k, j] = g
            V = np.sqrt(phi)[:, None] * R * np.sqrt(phi)[None, :]
            Vi = np.linalg.inv(V)
            lhs += c.X1.T @ Vi @ c.X1
            rhs += c.X1.T @ Vi @ (c.y - c.X1 @ beta)
        beta = beta + np.linalg.solve(lhs, rhs)
        # scale
        lhs = np.zeros((data.r, data.r))
        rhs = np.zeros(data.r)
        for c in data.clusters:
            phi = np.exp(c.X2 @ lam)
            s = (c.y - c.X1 @ beta) ** 2
            D = phi[:, None] * c.X2
            W = np.diag(1.0 / (2.0 * phi**2))
            lhs += D.T @ W @ D
            rhs += D.T @ W @ (s - phi)
        lam = lam + np.linalg.solve(lhs, rhs)
        # correlation
        lhs = np.zeros((n_lags, n_lags))
        rhs = np.zeros(n_lags)
        for c in data.clusters:
            e = (c.y - c.X1 @ beta) / np.sqrt(np.exp(c.X2 @ lam))
            jj, kk = pair_indices(c.m)
            z = e[jj] * e[kk]
            rho = c.X3 @ gamma
            W = np.diag(1.0 / (1.0 + rho**2))
            lhs += c.X3.T @ W @ c.X3
            rhs += c.X3.T @ W @ (z - rho)
        gamma = gamma + np.linalg.solve(lhs, rhs)
        if np.max(np.abs(np.concatenate([beta, lam, gamma]) - old)) < 1e-12:
            break
    return np.concatenate([beta, lam, gamma])


def test_matches_independent_constant_variance_solver():
    cfg = scenario_config("est-I", n_clusters=60)
    data = replicate_dataset(cfg, 7)
    assert np.array_equal(data.clusters[0].X3, toeplitz_design(4))
    ours = fit(data, cfg.model, FitOptions(tol=1e-12))
    np.testing.assert_allclose(ours.theta.stacked, _plain_gee_fit(data), atol=1e-9)
