from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import integrate

from conftest import make_model
from geemvc.exceptions import CandidateLimitError
from geemvc.fitter import FitOptions, fit
from geemvc.model import Cluster, ClusterDataset, ThetaVector, constant_one, tanh_shift
from geemvc.selection import (
    CandidateSupport,
    CriterionValue,
    _argmin,
    component_masks,
    full_model,
    joint_candidates,
    lic_joint,
    lic_marginal,
    q1_terms,
    q2_terms,
    q3_terms,
    qic,
    quasi_likelihood,
    search_terms,
    select,
)
from geemvc.simulate import replicate_dataset, scenario_config
from geemvc.variance import sandwich, slope_matrix


@pytest.fixture(scope="module")
def sel2():
    cfg = scenario_config("sel-II", n_clusters=150)
    data = replicate_dataset(cfg, 0)
    full = full_model(data, cfg.model)
    return cfg, data, full


# -- quasi-likelihood integrals ------------------------------------------------


def test_q2_worked_example():
    assert q2_terms(2.0, 1.0) == pytest.approx((math.log(2) - 1) / 2, abs=1e-15)
    assert q2_terms(2.0, 1.0) == pytest.approx(-0.15343, abs=5e-6)


def test_q3_empty_integral():
    assert q3_terms(0.0, 0.0) == 0.0


@pytest.mark.parametrize("s,phi", [(2.0, 1.0), (0.3, 1.7), (5.0, 4.9), (1e-3, 0.5)])
def test_q2_matches_quadrature(s, phi):
    num, _ = integrate.quad(lambda t: (s - t) / (2 * t * t), s, phi, epsabs=1e-14, epsrel=1e-13)
    assert abs(q2_terms(s, phi) - num) <= 1e-10


@pytest.mark.parametrize("z,rho", [(0.0, 0.3), (1.7, -0.4), (-2.5, 0.9), (0.2, 0.2)])
def test_q3_matches_quadrature(z, rho):
    num, _ = integrate.quad(lambda t: (z - t) / (1 + t * t), z, rho, epsabs=1e-14, epsrel=1e-13)
    assert abs(q3_terms(z, rho) - num) <= 1e-10


@pytest.mark.parametrize("vf", [constant_one(), tanh_shift()])
@pytest.mark.parametrize("y,mu,phi", [(0.3, 1.1, 2.0), (2.0, -3.0, 0.7), (-1.0, -1.0, 1.0), (4.0, 0.5, 3.0)])
def test_q1_matches_quadrature(vf, y, mu, phi):
    num, _ = integrate.quad(lambda t: (y - t) / (phi * vf.v(t)), y, mu, epsabs=1e-14, epsrel=1e-13)
    assert abs(q1_terms(y, mu, phi, vf) - num) <= 1e-10


def test_q_terms_are_never_positive():
    rng = np.random.default_rng(0)
    z, rho = rng.normal(size=50), rng.uniform(-0.9, 0.9, 50)
    s, phi = rng.exponential(size=50), rng.exponential(size=50)
    assert np.all(q3_terms(z, rho) <= 1e-15)
    assert np.all(q2_terms(s, phi) <= 1e-15)
    assert np.all(q1_terms(z, rho, phi, tanh_shift()) <= 1e-15)


def test_omega_is_negative_hessian_of_q(sel2):
    cfg, data, full = sel2
    support = CandidateSupport.full(3, 3, 3)
    theta = full.fit.theta
    for comp in ("mean", "scale", "corr"):
        _, omega = quasi_likelihood(full, comp, theta, support)

        def Q(x, comp=comp):
            return quasi_likelihood(full, comp, theta.replace(comp, x), support)[0]

        x0 = theta.component(comp)
        h = 1e-4
        k = x0.size
        H = np.zeros((k, k))
        for i in range(k):
            for j in range(k):
                ei, ej = h * np.eye(k)[i], h * np.eye(k)[j]
                H[i, j] = (Q(x0 + ei + ej) - Q(x0 + ei - ej) - Q(x0 - ei + ej) + Q(x0 - ei - ej)) / (4 * h * h)
        np.testing.assert_allclose(omega, -H, rtol=1e-4, atol=1e-4 * np.abs(H).max())


# -- candidate spaces ----------------------------------------------------------


def test_candidate_counts():
    assert len(joint_candidates(3, 3, 3)) == 64
    masks = [component_masks(d) for d in (3, 3, 3)]
    assert sum(len(m) for m in masks) == 2**2 + 2**2 + 2**2
    assert all(m[0] for ms in masks for m in ms)
    assert len(component_masks(3, forced=())) == 7
    assert len(joint_candidates(3, 3, 3, forced={"mean": (0,), "scale": (0,)})) == 4 * 4 * 7
    with pytest.raises(CandidateLimitError):
        joint_candidates(22, 1, 1)


def test_scenario_forced_columns():
    # normal pair covariates have no intercept-like column to keep
    assert scenario_config("sel-I").forced == (0, 0, ())
    assert scenario_config("sel-II").forced == (0, 0, 0)
    assert len(joint_candidates(3, 3, 3, scenario_config("sel-I").forced)) == 112


def test_support_validation():
    with pytest.raises(ValueError):
        CandidateSupport((False, False), (True,), (True,))
    s = CandidateSupport.full(2, 1, 3).with_mask("corr", (True, False, True))
    assert s.n_active == 5 and not s.is_full
    assert s.active_columns() == {"mean": [0, 1], "scale": [0], "corr": [0, 2]}


def test_ties_go_to_smaller_then_lexicographic_support():
    a = CandidateSupport((True, True), (True,), (True,))
    b = CandidateSupport((True, False), (True,), (True,))
    c = CandidateSupport((False, True), (True,), (True,))
    vals = [CriterionValue(s, 1.0, 0.0, 1.0) for s in (a, b, c)]
    assert _argmin(vals).support == c
    vals.append(CriterionValue(a, 0.5, 0.0, 0.5))
    assert _argmin(vals).support == a


# -- LIC -----------------------------------------------------------------------


def test_full_model_has_zero_loss(sel2):
    cfg, data, full = sel2
    v = lic_joint(data, full.fit, CandidateSupport.full(3, 3, 3), full=full)
    assert v.loss == 0.0 and v.total == v.penalty
    for comp in ("mean", "scale", "corr"):
        m = lic_marginal(data, full.fit, comp, (True, True, True), full=full)
        assert m.loss == 0.0
        assert m.total == pytest.approx(m.penalty)


def _drop(data, support):
    m1, m2, m3 = (np.array(x) for x in (support.mean_mask, support.scale_mask, support.corr_mask))
    return ClusterDataset(tuple(Cluster(c.id, c.y, c.X1[:, m1], c.X2[:, m2], c.X3[:, m3]) for c in data.clusters))


def test_joint_lic_matches_brute_force():
    rng = np.random.default_rng(9)
    clusters = []
    for i in range(80):
        X1 = np.column_stack([np.ones(3), rng.normal(size=3)])
        y = 0.5 + 0.15 * X1[:, 1] + rng.normal(size=3) * 0.8 + 0.3 * rng.normal()
        clusters.append(Cluster(i, y, X1, np.ones((3, 1)), np.ones((3, 1))))
    data = ClusterDataset(tuple(clusters))
    model = make_model("constant-one")
    full_fit = fit(data, model)
    S_full = slope_matrix(data, full_fit.theta, model).assembled
    for mask in [(True, False), (False, True)]:
        support = CandidateSupport(mask, (True,), (True,))
        sub = _drop(data, support)
        sub_fit = fit(sub, model)
        padded = np.zeros(4)
        padded[np.r_[np.array(mask), True, True]] = sub_fit.theta.stacked
        diff = padded - full_fit.theta.stacked
        sw = sandwich(sub, sub_fit.theta, model)
        loss = diff @ S_full @ diff
        trace = np.trace(sw.sigma1.assembled @ sw.v_yf)
        for pen, k in (("log_n", math.log(80)), ("two", 2.0)):
            v = lic_joint(data, full_fit, support, pen, model=model)
            assert v.loss == pytest.approx(loss, rel=1e-6)
            assert v.total == pytest.approx(loss + k * trace, rel=1e-6)


def test_quadratic_term_agrees_with_likelihood_ratio_to_second_order():
    # Gaussian, single-unit clusters, one covariate orthogonal to the intercept
    # and to the noise, so the full-model slope equals t exactly.
    rng = np.random.default_rng(2)
    n = 400
    x = rng.normal(size=n)
    x -= x.mean()
    e = rng.normal(size=n)
    X = np.column_stack([np.ones(n), x])
    e -= X @ np.linalg.lstsq(X, e, rcond=None)[0]
    model = make_model("constant-one")
    opts = dict(free=("mean", "scale"))
    gaps = []
    for t in (0.2, 0.1, 0.05):
        y = 1.0 + t * x + e
        data = ClusterDataset(tuple(Cluster(i, [y[i]], X[i:i + 1], [[1.0]], np.zeros((0, 1))) for i in range(n)))
        full_fit = fit(data, model, FitOptions(theta0=ThetaVector([0, 0], [0.0], [0.0]), **opts))
        sub = _drop(data, CandidateSupport((True, False), (True,), (True,)))
        sub_fit = fit(sub, model, FitOptions(theta0=ThetaVector([0], [0.0], [0.0]), **opts))
        diff = np.r_[sub_fit.theta.beta[0], 0.0, sub_fit.theta.lam, 0.0] - full_fit.theta.stacked
        quad = diff @ slope_matrix(data, full_fit.theta, model).assembled @ diff
        rss_f = np.sum((y - X @ full_fit.theta.beta) ** 2)
        rss_c = np.sum((y - sub_fit.theta.beta[0]) ** 2)
        lr = n * math.log(rss_c / rss_f)
        gaps.append(abs(quad - lr) / lr)
    assert gaps[-1] < 0.01
    assert gaps[0] > gaps[1] > gaps[2]


def test_qic_flavours_share_the_quasi_likelihood(sel2):
    cfg, data, full = sel2
    for comp in ("mean", "scale", "corr"):
        a = qic(data, full.fit, comp, (True, True, False), "yf", full=full)
        b = qic(data, full.fit, comp, (True, True, False), "lp", full=full)
        assert a.loss == b.loss
        assert a.feasible and b.feasible


def test_search_and_select_agree(sel2):
    cfg, data, full = sel2
    terms = search_terms(data, cfg.model, full=full)
    assert len(terms.joint) == 64
    assert sum(len(v) for v in terms.marginal.values()) == 12
    for strategy in ("lic_joint", "lic_marginal", "qic_yf", "qic_lp"):
        chosen, values = terms.choose(strategy, "log_n")
        res = select(data, cfg.model, strategy, "bic", full_fit=full.fit)
        assert res.chosen == chosen
        assert res.penalty == "log_n"
        assert res.refit.converged
        assert res.refit.theta.dims == tuple(sum(chosen.mask(c)) for c in ("mean", "scale", "corr"))
    truth = CandidateSupport((True, True, False), (True, True, False), (True, True, False))
    assert terms.choose("lic_joint", "log_n")[0] == truth


def test_marginal_pins_other_components(sel2):
    cfg, data, full = sel2
    from geemvc.selection import marginal_terms

    t = marginal_terms(full, "scale", (True, False, True))
    assert t.feasible and t.lic_loss > 0
    v = lic_marginal(data, full.fit, "scale", (True, False, True), "two", full=full)
    assert v.loss == t.lic_loss and v.total == pytest.approx(t.lic_loss + 2 * t.lic_trace)


def test_parallel_search_is_identical(sel2):
    cfg, data, full = sel2
    one = search_terms(data, cfg.model, ("lic_marginal",), full=full, workers=1)
    two = search_terms(data, cfg.model, ("lic_marginal",), full=full, workers=2)
    # repr keeps every digit and treats the unused NaN fields as equal
    assert repr(one.marginal) == repr(two.marginal)


def test_single_column_components_return_full_model():
    rng = np.random.default_rng(1)
    clusters = [Cluster(i, rng.normal(size=3), np.ones((3, 1)), np.ones((3, 1)), np.ones((3, 1)))
                for i in range(40)]
    res = select(ClusterDataset(tuple(clusters)), make_model("constant-one"), "lic_joint")
    assert res.chosen.is_full and len(res.criteria) == 1


def test_unknown_strategy():
    with pytest.raises(ValueError):
        select(None, make_model(), "cic")
