from __future__ import annotations

import numpy as np
import pytest

from conftest import make_model, random_dataset, random_theta
from geemvc.equations import cluster_quantities, score_residual_derivatives
from geemvc.exceptions import IdentifiabilityError
from geemvc.fitter import fit
from geemvc.model import Cluster, ClusterDataset, ThetaVector
from geemvc.simulate import replicate_dataset, scenario_config
from geemvc.variance import (
    SlopeMatrix,
    block_diagnostics,
    meat_matrix,
    sandwich,
    sandwich_from,
    slope_matrix,
)


@pytest.fixture(scope="module")
def est2_fit():
    cfg = scenario_config("est-II", n_clusters=60)
    data = replicate_dataset(cfg, 2)
    res = fit(data, cfg.model)
    assert res.converged
    return data, res.theta, cfg.model


def _frozen_equations(data, theta_hat, model):
    """U(theta) with every D and V fixed at theta_hat; only the residuals move."""
    frozen = []
    for c in data.clusters:
        cq = cluster_quantities(c, theta_hat, model)
        W3 = np.linalg.inv(cq.V3) if c.m > 1 else None
        frozen.append((c, cq.D1.T @ np.linalg.inv(cq.V1), cq.D2.T @ np.linalg.inv(cq.V2),
                       None if W3 is None else cq.D3.T @ W3))

    def U(vec):
        theta = ThetaVector.from_stacked(vec, *theta_hat.dims)
        parts = [np.zeros(d) for d in theta.dims]
        for c, L1, L2, L3 in frozen:
            cq = cluster_quantities(c, theta, model)
            parts[0] += L1 @ cq.eps
            parts[1] += L2 @ (cq.s - cq.phi)
            if L3 is not None:
                parts[2] += L3 @ (cq.z - cq.rho)
        return np.concatenate(parts)

    return U


def _jacobian(func, x, h=1e-6):
    return np.column_stack([(func(x + h * e) - func(x - h * e)) / (2 * h) for e in np.eye(x.size)])


def _check_slope_against_jacobian(data, theta, model):
    S = slope_matrix(data, theta, model).assembled
    J = -_jacobian(_frozen_equations(data, theta, model), theta.stacked)
    assert np.max(np.abs(S - J)) <= 1e-4 * np.max(np.abs(J))


def test_slope_matches_numeric_jacobian_at_fit(est2_fit):
    _check_slope_against_jacobian(*est2_fit)


@pytest.mark.parametrize("seed", range(6))
def test_slope_matches_numeric_jacobian_random(seed):
    rng = np.random.default_rng(seed)
    corr_link = "fisher-z" if seed % 2 else "identity"
    model = make_model("tanh-shift", corr_link=corr_link, r2="cs:0.2" if seed > 3 else "identity")
    data = random_dataset(rng, n=5, sizes=(2, 3, 4), p=2, r=2, q=2)
    _check_slope_against_jacobian(data, random_theta(rng), model)


def _block_meat(data, theta, model):
    """Sum of the 3x3 block display with residual outer products as covariance estimates."""
    p, r, q = theta.dims
    out = np.zeros((p + r + q, p + r + q))
    for c in data.clusters:
        cq = cluster_quantities(c, theta, model)
        left = [cq.D1.T @ np.linalg.inv(cq.V1), cq.D2.T @ np.linalg.inv(cq.V2)]
        resid = [cq.eps, cq.s - cq.phi]
        if c.m > 1:
            left.append(cq.D3.T @ np.linalg.inv(cq.V3))
            resid.append(cq.z - cq.rho)
        else:
            left.append(np.zeros((q, 0)))
            resid.append(np.zeros(0))
        offs = np.cumsum([0, p, r, q])
        for a in range(3):
            for b in range(3):
                cov_ab = np.outer(resid[a], resid[b])
                out[offs[a]:offs[a + 1], offs[b]:offs[b + 1]] += left[a] @ cov_ab @ left[b].T
    return out


def test_meat_matches_block_display():
    rng = np.random.default_rng(17)
    model = make_model("tanh-shift", r2="ar1:0.3", r3="cs:0.1")
    data = random_dataset(rng, n=7, sizes=(1, 2, 3, 4))
    theta = random_theta(rng)
    np.testing.assert_allclose(meat_matrix(data, theta, model), _block_meat(data, theta, model),
                               rtol=1e-10, atol=1e-12)


def test_meat_is_psd_and_rank_one_for_one_cluster(est2_fit):
    data, theta, model = est2_fit
    w = np.linalg.eigvalsh(meat_matrix(data, theta, model))
    assert w[0] >= -1e-9 * w[-1]
    single = ClusterDataset(data.clusters[:1])
    assert np.linalg.matrix_rank(meat_matrix(single, theta, model), tol=1e-9) <= 1


def test_meat_mean_block_vanishes_without_residuals():
    X = np.column_stack([np.ones(3), [0.2, -0.5, 1.0]])
    theta = ThetaVector([0.5, 1.0], [0.0], [0.2])
    clusters = [Cluster(i, X @ theta.beta, X, np.ones((3, 1)), np.ones((3, 1))) for i in range(3)]
    meat = meat_matrix(ClusterDataset(tuple(clusters)), theta, make_model("constant-one"))
    np.testing.assert_array_equal(meat[:2, :2], 0.0)


def test_single_unit_slope_is_cross_product():
    X1 = np.array([[1.0, 0.7]])
    c = Cluster(0, [1.3], X1, [[1.0]], np.zeros((0, 1)))
    S = slope_matrix(ClusterDataset((c,)), ThetaVector([0.0, 0.0], [0.0], [0.0]), make_model("constant-one"))
    np.testing.assert_allclose(S.A, X1.T @ X1, rtol=1e-15)


def test_block_inverse_matches_dense_inverse(est2_fit):
    S = slope_matrix(*est2_fit)
    np.testing.assert_allclose(S.inverse() @ S.assembled, np.eye(sum(S.dims)), atol=1e-10)


def test_sandwich_flavours(est2_fit):
    sw = sandwich(*est2_fit)
    p = sw.sigma1.dims[0]
    np.testing.assert_allclose(sw.v_yf[:p, :p], sw.v_lp[:p, :p], rtol=1e-12, atol=0)
    for V in (sw.v_yf, sw.v_lp):
        np.testing.assert_array_equal(V, V.T)
        assert np.linalg.eigvalsh(V)[0] >= -1e-12 * np.abs(V).max()
    assert np.all(np.isfinite(sw.se_yf)) and np.all(sw.se_yf > 0)
    assert np.all(sw.se_lp > 0)
    flat = sandwich_from(sw.sigma1.block_diagonal(), sw.sigma2)
    np.testing.assert_array_equal(flat.v_yf, flat.v_lp)
    np.testing.assert_array_equal(sw.block("corr", "lp"), sw.v_lp[-3:, -3:])


def test_singular_block_is_reported():
    A = np.eye(2)
    S = SlopeMatrix(A, np.zeros((1, 2)), np.zeros((1, 1)), np.zeros((1, 2)), np.zeros((1, 1)), np.eye(1))
    with pytest.raises(IdentifiabilityError, match="non-identifiable component: scale"):
        S.inverse()


def test_cross_blocks_follow_derivatives():
    rng = np.random.default_rng(21)
    model = make_model("tanh-shift")
    data = random_dataset(rng, n=4, sizes=(3,))
    theta = random_theta(rng)
    S = slope_matrix(data, theta, model)
    E = np.zeros_like(S.E)
    for c in data.clusters:
        cq = cluster_quantities(c, theta, model)
        E += cq.D3.T @ np.linalg.solve(cq.V3, score_residual_derivatives(c, theta, model)[2])
    np.testing.assert_allclose(S.E, E, rtol=1e-10)


def test_diagnostics_separate_the_two_designs():
    est = scenario_config("est-I", n_clusters=300)
    data = replicate_dataset(est, 0)
    toeplitz = d = block_diagnostics(data, fit(data, est.model).theta, est.model)
    assert d.scaled_e > 0.25 and d.norm_e > 0.1
    assert d.scaled_e == pytest.approx(d.expected_pair_e[0], abs=0.05)

    lp = scenario_config("diag-lp", n_clusters=300)
    data = replicate_dataset(lp, 0)
    d = block_diagnostics(data, fit(data, lp.model).theta, lp.model)
    assert d.scaled_e < 0.05
    assert abs(d.rho_mean) < 0.02
    assert d.rho_counts.sum() == data.n_pairs

    null = scenario_config("est-I", n_clusters=300, true_theta=ThetaVector([0, -1, 0.5], [2, 1, -1], [0, 0, 0]))
    data = replicate_dataset(null, 0)
    d = block_diagnostics(data, fit(data, null.model).theta, null.model)
    # E/n only vanishes as n grows; at n = 300 sampling noise remains
    assert d.scaled_e < 0.05
    assert d.norm_e < toeplitz.norm_e / 3
