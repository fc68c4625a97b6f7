"""Model selection for the joint mean-scale-correlation model.

Two criteria are provided.

LIC treats the estimating functions as the gradient of an unknown objective
and replaces that objective by its quadratic expansion at the full-model
estimate.  A candidate ``c`` scores::

    (t_c - t_f)' S_f (t_c - t_f) + k * tr(S_c V_c)

where ``t_c`` is the candidate estimate padded with zeros, ``S`` the slope
matrix and ``V_c`` the candidate's block-triangular sandwich covariance.  The
joint version searches all three components at once, the marginal version one
component at a time with the other two pinned at their full-model estimates.

QIC uses the quasi-likelihood of each component under working independence,
``-2 Q + k * tr(Omega V)``, with ``Omega`` the negative Hessian of ``Q`` and
``V`` taken from either sandwich flavour.

``k`` is ``log(n)`` (BIC-type) or 2 (AIC-type).
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss

from .equations import group_state
from .exceptions import CandidateLimitError, GEEError
from .fitter import FitOptions, FitResult, fit
from .parallel import ordered_map
from .model import COMPONENTS, ClusterDataset, ModelSpec, PackedData, ThetaVector
from .variance import SandwichResult, sandwich

MAX_JOINT_CANDIDATES = 2**20
STRATEGIES = ("lic_joint", "lic_marginal", "qic_yf", "qic_lp")


def penalty_value(penalty, n: int) -> float:
    if isinstance(penalty, (int, float)):
        return float(penalty)
    key = str(penalty).lower().replace("-", "_")
    if key in ("log_n", "logn", "bic"):
        return math.log(n)
    if key in ("two", "2", "aic"):
        return 2.0
    raise ValueError(f"unknown penalty {penalty!r}")


def penalty_name(penalty) -> str:
    if isinstance(penalty, (int, float)):
        return f"{float(penalty):g}"
    key = str(penalty).lower().replace("-", "_")
    return {"bic": "log_n", "logn": "log_n", "aic": "two", "2": "two"}.get(key, key)


@dataclass(frozen=True)
class CandidateSupport:
    mean_mask: tuple[bool, ...]
    scale_mask: tuple[bool, ...]
    corr_mask: tuple[bool, ...]

    def __post_init__(self):
        for name in ("mean_mask", "scale_mask", "corr_mask"):
            mask = tuple(bool(b) for b in getattr(self, name))
            if not any(mask):
                raise ValueError(f"{name} must keep at least one column")
            object.__setattr__(self, name, mask)

    @classmethod
    def full(cls, p: int, r: int, q: int) -> CandidateSupport:
        return cls((True,) * p, (True,) * r, (True,) * q)

    def mask(self, component: str) -> tuple[bool, ...]:
        return {"mean": self.mean_mask, "scale": self.scale_mask, "corr": self.corr_mask}[component]

    def with_mask(self, component: str, mask) -> CandidateSupport:
        masks = {c: self.mask(c) for c in COMPONENTS}
        masks[component] = tuple(mask)
        return CandidateSupport(masks["mean"], masks["scale"], masks["corr"])

    @property
    def masks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(np.array(self.mask(c), dtype=bool) for c in COMPONENTS)

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate(self.masks)

    @property
    def n_active(self) -> int:
        return int(self.flat.sum())

    @property
    def is_full(self) -> bool:
        return bool(self.flat.all())

    def sort_key(self):
        return self.n_active, tuple(int(b) for b in self.flat)

    def active_columns(self, names: dict[str, list[str]] | None = None) -> dict[str, list]:
        out = {}
        for c in COMPONENTS:
            idx = [i for i, b in enumerate(self.mask(c)) if b]
            out[c] = [names[c][i] for i in idx] if names else idx
        return out


@dataclass(frozen=True)
class CriterionValue:
    support: CandidateSupport
    loss: float
    penalty: float
    total: float
    trace: float = float("nan")
    feasible: bool = True
    component: str | None = None

    def key(self):
        return (self.total,) + self.support.sort_key()


@dataclass(frozen=True)
class SelectionResult:
    strategy: str
    penalty: str
    penalty_scale: float
    chosen: CandidateSupport
    criteria: tuple[CriterionValue, ...]
    refit: FitResult | None
    refit_sandwich: SandwichResult | None = None
    infeasible: tuple[tuple[CandidateSupport, str], ...] = ()


# ---------------------------------------------------------------------------
# candidate spaces
# ---------------------------------------------------------------------------


def component_masks(dim: int, forced=(0,)) -> list[tuple[bool, ...]]:
    """All masks over ``dim`` columns that keep the ``forced`` positions."""
    forced = {f for f in forced if f is not None and 0 <= f < dim}
    free = [i for i in range(dim) if i not in forced]
    out = []
    for bits in itertools.product((False, True), repeat=len(free)):
        mask = [i in forced for i in range(dim)]
        for i, b in zip(free, bits):
            mask[i] = b
        if any(mask):
            out.append(tuple(mask))
    return out


def _forced_per_component(forced) -> dict[str, tuple]:
    if forced is None:
        return {c: () for c in COMPONENTS}
    if isinstance(forced, dict):
        return {c: tuple(forced.get(c, ())) for c in COMPONENTS}
    return {c: (f,) if not isinstance(f, (tuple, list)) else tuple(f) for c, f in zip(COMPONENTS, forced)}


def joint_candidates(p: int, r: int, q: int, forced=(0, 0, 0)) -> list[CandidateSupport]:
    fc = _forced_per_component(forced)
    spaces = [component_masks(d, fc[c]) for d, c in zip((p, r, q), COMPONENTS)]
    total = math.prod(len(s) for s in spaces)
    if total > MAX_JOINT_CANDIDATES:
        raise CandidateLimitError(
            f"joint search needs {total} candidates, above the limit of {MAX_JOINT_CANDIDATES}"
        )
    return [CandidateSupport(a, b, c) for a, b, c in itertools.product(*spaces)]


# ---------------------------------------------------------------------------
# refits
# ---------------------------------------------------------------------------


def _packed(data) -> PackedData:
    return data.packed if isinstance(data, ClusterDataset) else data


def _restrict_theta(theta: ThetaVector, support: CandidateSupport) -> ThetaVector:
    m1, m2, m3 = support.masks
    return ThetaVector(theta.beta[m1], theta.lam[m2], theta.gamma[m3])


def pad_theta(theta: ThetaVector, support: CandidateSupport) -> np.ndarray:
    """Candidate estimate at full length, zeros at the dropped columns."""
    out = np.zeros(support.flat.size)
    out[support.flat] = theta.stacked
    return out


@dataclass
class _Refit:
    support: CandidateSupport
    theta: ThetaVector | None
    sandwich: SandwichResult | None
    fit: FitResult | None = None
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.theta is not None


def _refit(packed, model, full_theta, support, free, opts) -> _Refit:
    sub = packed.restrict(*support.masks)
    warm = _restrict_theta(full_theta, support)
    try:
        res = fit(sub, model, FitOptions(opts.max_iter, opts.tol, warm, free))
        if not res.converged:
            return _Refit(support, None, None, res, "refit did not converge")
        sw = sandwich(sub, res.theta, model)
    except (GEEError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _Refit(support, None, None, None, str(exc))
    return _Refit(support, res.theta, sw, res)


@dataclass
class FullModel:
    """Full-model fit and sandwich shared by every candidate evaluation."""

    packed: PackedData
    model: ModelSpec
    fit: FitResult
    sandwich: SandwichResult

    @property
    def n(self) -> int:
        return self.packed.n

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.packed.p, self.packed.r, self.packed.q


def full_model(data, model: ModelSpec, full_fit: FitResult | None = None, opts: FitOptions | None = None) -> FullModel:
    packed = _packed(data)
    opts = opts or FitOptions()
    if full_fit is None:
        full_fit = fit(packed, model, opts)
    if not full_fit.converged:
        raise GEEError("full model did not converge")
    return FullModel(packed, model, full_fit, sandwich(packed, full_fit.theta, model))


# ---------------------------------------------------------------------------
# LIC
# ---------------------------------------------------------------------------


def _quadratic(diff: np.ndarray, S: np.ndarray, symmetrize: bool) -> float:
    if symmetrize:
        S = 0.5 * (S + S.T)
    return float(diff @ S @ diff)


@dataclass(frozen=True)
class JointTerms:
    support: CandidateSupport
    loss: float
    trace: float
    feasible: bool = True
    reason: str = ""


def joint_terms(full: FullModel, support: CandidateSupport, symmetrize: bool = False,
                opts: FitOptions | None = None) -> JointTerms:
    if support.is_full:
        sw = full.sandwich
        return JointTerms(support, 0.0, float(np.trace(sw.sigma1.assembled @ sw.v_yf)))
    ref = _refit(full.packed, full.model, full.fit.theta, support, COMPONENTS, opts or FitOptions())
    if not ref.ok:
        return JointTerms(support, math.inf, math.inf, False, ref.reason)
    diff = pad_theta(ref.theta, support) - full.fit.theta.stacked
    loss = _quadratic(diff, full.sandwich.sigma1.assembled, symmetrize)
    trace = float(np.trace(ref.sandwich.sigma1.assembled @ ref.sandwich.v_yf))
    return JointTerms(support, loss, trace)


def lic_joint(data, full_fit: FitResult, candidate: CandidateSupport, penalty="log_n",
              model: ModelSpec | None = None, symmetrize: bool = False,
              full: FullModel | None = None) -> CriterionValue:
    full = full or full_model(data, model or full_fit.model, full_fit)
    t = joint_terms(full, candidate, symmetrize)
    return _criterion(t.support, t.loss, t.trace, penalty_value(penalty, full.n), t.feasible)


def _criterion(support, loss, trace, scale, feasible=True, component=None) -> CriterionValue:
    if not feasible:
        return CriterionValue(support, math.inf, math.inf, math.inf, math.inf, False, component)
    pen = scale * trace
    return CriterionValue(support, loss, pen, loss + pen, trace, True, component)


# ---------------------------------------------------------------------------
# quasi-likelihoods
# ---------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = leggauss(10)
_PANEL_WIDTH = 0.5


def q1_terms(y, mu, phi, vf) -> np.ndarray:
    """Per-unit ``int_y^mu (y - t) / (phi v(t)) dt``.

    Closed form for a constant variance function; otherwise composite
    Gauss-Legendre over panels of width at most 0.5.
    """
    y, mu, phi = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (y, mu, phi)))
    width = mu - y
    if vf.is_constant:
        return -(width**2) / (2.0 * phi)
    panels = max(1, int(np.ceil(np.max(np.abs(width), initial=0.0) / _PANEL_WIDTH)))
    u = (np.arange(panels)[:, None] + 0.5 * (_GL_NODES + 1.0)[None, :]) / panels
    w = 0.5 * _GL_WEIGHTS / panels
    t = y[..., None, None] + width[..., None, None] * u
    integral = (u / vf.v(t) * w).sum(axis=(-1, -2))
    return -(width**2) * integral / phi


def q2_terms(s, phi) -> np.ndarray:
    """Per-unit ``int_s^phi (s - t) / (2 t^2) dt`` in closed form."""
    s = np.maximum(np.asarray(s, dtype=float), np.finfo(float).tiny)
    ratio = s / phi
    return 0.5 * (1.0 - ratio + np.log(ratio))


def q3_terms(z, rho) -> np.ndarray:
    """Per-pair ``int_z^rho (z - t) / (1 + t^2) dt`` in closed form."""
    z = np.asarray(z, dtype=float)
    return z * (np.arctan(rho) - np.arctan(z)) - 0.5 * np.log((1.0 + rho**2) / (1.0 + z**2))


def _q_derivatives(component, target, cand, vf):
    """First and second derivatives of the per-row integrand ``q`` in its upper limit."""
    if component == "mean":
        y, phi_f, mu = target
        v = vf.v(mu)
        resid = y - mu
        d1 = resid / (phi_f * v)
        d2 = -1.0 / (phi_f * v) - resid * vf.dv(mu) / (phi_f * v * v)
    elif component == "scale":
        s, phi = target, cand
        d1 = (s - phi) / (2.0 * phi**2)
        d2 = -1.0 / (2.0 * phi**2) - (s - phi) / phi**3
    else:
        z, rho = target, cand
        den = 1.0 + rho**2
        d1 = (z - rho) / den
        d2 = -1.0 / den - 2.0 * rho * (z - rho) / den**2
    return d1, d2


def quasi_likelihood(full: FullModel, component: str, theta_c: ThetaVector,
                     support: CandidateSupport) -> tuple[float, np.ndarray]:
    """``Q`` of one component at the candidate estimate and its negative Hessian.

    Everything other than the component's own fitted moment is evaluated at the
    full-model estimate.
    """
    model, vf, links = full.model, full.model.variance, full.model.links
    sub = full.packed.restrict(*support.masks)
    total = 0.0
    dim = int(np.sum(support.mask(component)))
    omega = np.zeros((dim, dim))
    for g_full, g_sub in zip(full.packed.groups, sub.groups):
        if component == "corr" and g_full.m < 2:
            continue
        ref = group_state(g_full, full.fit.theta, model)
        cand = group_state(g_sub, theta_c, model)
        if component == "mean":
            eta = g_sub.X1 @ theta_c.beta
            link, X = links.mean, g_sub.X1
            total += q1_terms(g_full.y, cand.mu, ref.phi, vf).sum()
            d1, d2 = _q_derivatives("mean", (g_full.y, ref.phi, cand.mu), None, vf)
        elif component == "scale":
            eta = g_sub.X2 @ theta_c.lam
            link, X = links.scale, g_sub.X2
            total += q2_terms(ref.s, cand.phi).sum()
            d1, d2 = _q_derivatives("scale", ref.s, cand.phi, vf)
        else:
            eta = g_sub.X3 @ theta_c.gamma
            link, X = links.corr, g_sub.X3
            total += q3_terms(ref.z, cand.rho).sum()
            d1, d2 = _q_derivatives("corr", ref.z, cand.rho, vf)
        t1, t2 = link.dinverse(eta), link.d2inverse(eta)
        weight = -(d2 * t1 * t1 + d1 * t2)
        Xf = X.reshape(-1, dim)
        omega += Xf.T @ (weight.reshape(-1)[:, None] * Xf)
    return float(total), omega


# ---------------------------------------------------------------------------
# marginal search (LIC and QIC share the refits)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MarginalTerms:
    component: str
    support: CandidateSupport
    lic_loss: float
    lic_trace: float
    qic_fit: float
    qic_trace_yf: float
    qic_trace_lp: float
    feasible: bool = True
    reason: str = ""

    @property
    def mask(self) -> tuple[bool, ...]:
        return self.support.mask(self.component)


def marginal_terms(full: FullModel, component: str, mask, symmetrize: bool = False,
                   opts: FitOptions | None = None, need_qic: bool = True) -> MarginalTerms:
    p, r, q = full.dims
    support = CandidateSupport.full(p, r, q).with_mask(component, mask)
    if support.is_full:
        theta_c, sw = full.fit.theta, full.sandwich
    else:
        ref = _refit(full.packed, full.model, full.fit.theta, support, (component,),
                     opts or FitOptions())
        if not ref.ok:
            inf = math.inf
            return MarginalTerms(component, support, inf, inf, inf, inf, inf, False, ref.reason)
        theta_c, sw = ref.theta, ref.sandwich

    m = np.array(support.mask(component))
    diff = np.zeros(m.size)
    diff[m] = theta_c.component(component)
    diff -= full.fit.theta.component(component)
    S_full = full.sandwich.sigma1.diagonal_block(component)
    lic_loss = _quadratic(diff, S_full, symmetrize)
    S_c = sw.sigma1.diagonal_block(component)
    V_yf = sw.block(component, "yf")
    lic_trace = float(np.trace(S_c @ V_yf))

    if need_qic:
        qval, omega = quasi_likelihood(full, component, theta_c, support)
        qic_fit = -2.0 * qval
        tr_yf = float(np.trace(omega @ V_yf))
        tr_lp = float(np.trace(omega @ sw.block(component, "lp")))
    else:
        qic_fit = tr_yf = tr_lp = math.nan
    return MarginalTerms(component, support, lic_loss, lic_trace, qic_fit, tr_yf, tr_lp)


def lic_marginal(data, full_fit: FitResult, component: str, candidate_mask, penalty="log_n",
                 model: ModelSpec | None = None, symmetrize: bool = False,
                 full: FullModel | None = None) -> CriterionValue:
    full = full or full_model(data, model or full_fit.model, full_fit)
    t = marginal_terms(full, component, candidate_mask, symmetrize, need_qic=False)
    return _criterion(t.support, t.lic_loss, t.lic_trace, penalty_value(penalty, full.n),
                      t.feasible, component)


def qic(data, full_fit: FitResult, component: str, candidate_mask, variance_flavor="yf",
        penalty="log_n", model: ModelSpec | None = None,
        full: FullModel | None = None) -> CriterionValue:
    full = full or full_model(data, model or full_fit.model, full_fit)
    t = marginal_terms(full, component, candidate_mask)
    trace = t.qic_trace_yf if variance_flavor == "yf" else t.qic_trace_lp
    return _criterion(t.support, t.qic_fit, trace, penalty_value(penalty, full.n),
                      t.feasible, component)


def marginal_value(t: MarginalTerms, strategy: str, scale: float) -> CriterionValue:
    if strategy == "lic_marginal":
        loss, trace = t.lic_loss, t.lic_trace
    elif strategy == "qic_yf":
        loss, trace = t.qic_fit, t.qic_trace_yf
    elif strategy == "qic_lp":
        loss, trace = t.qic_fit, t.qic_trace_lp
    else:
        raise ValueError(f"{strategy} is not a marginal strategy")
    return _criterion(t.support, loss, trace, scale, t.feasible, t.component)


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


@dataclass
class SearchTerms:
    """Penalty-free pieces of every candidate, reusable across penalties and strategies."""

    full: FullModel
    joint: list[JointTerms] = field(default_factory=list)
    marginal: dict[str, list[MarginalTerms]] = field(default_factory=dict)

    def choose(self, strategy: str, penalty) -> tuple[CandidateSupport, list[CriterionValue]]:
        scale = penalty_value(penalty, self.full.n)
        if strategy == "lic_joint":
            values = [_criterion(t.support, t.loss, t.trace, scale, t.feasible) for t in self.joint]
            return _argmin(values).support, values
        values = []
        chosen = CandidateSupport.full(*self.full.dims)
        for comp in COMPONENTS:
            comp_values = [marginal_value(t, strategy, scale) for t in self.marginal[comp]]
            values.extend(comp_values)
            chosen = chosen.with_mask(comp, _argmin(comp_values).support.mask(comp))
        return chosen, values


def _argmin(values: list[CriterionValue]) -> CriterionValue:
    feasible = [v for v in values if v.feasible and np.isfinite(v.total)]
    if not feasible:
        raise GEEError("no feasible candidate")
    return min(feasible, key=CriterionValue.key)


def _marginal_task(full, symmetrize, opts, need_qic, item):
    comp, mask = item
    return marginal_terms(full, comp, mask, symmetrize, opts, need_qic)


def search_terms(data, model: ModelSpec, strategies=STRATEGIES, full_fit: FitResult | None = None,
                 forced=(0, 0, 0), symmetrize: bool = False, opts: FitOptions | None = None,
                 full: FullModel | None = None, workers: int | None = 1) -> SearchTerms:
    """Refit every candidate needed by ``strategies`` once.

    ``workers`` spreads the refits over processes; ``None`` reads
    ``GEEMVC_THREADS``.  Results do not depend on it.
    """
    full = full or full_model(data, model, full_fit, opts)
    out = SearchTerms(full)
    p, r, q = full.dims
    if "lic_joint" in strategies:
        task = functools.partial(joint_terms, full, symmetrize=symmetrize, opts=opts)
        out.joint = ordered_map(task, joint_candidates(p, r, q, forced), workers)
    marginal = [s for s in strategies if s != "lic_joint"]
    if marginal:
        need_qic = any(s.startswith("qic") for s in marginal)
        fc = _forced_per_component(forced)
        items = [(comp, mask) for comp, dim in zip(COMPONENTS, (p, r, q))
                 for mask in component_masks(dim, fc[comp])]
        task = functools.partial(_marginal_task, full, symmetrize, opts, need_qic)
        results = ordered_map(task, items, workers)
        for comp in COMPONENTS:
            out.marginal[comp] = [t for t in results if t.component == comp]
    return out


def select(data, model: ModelSpec, strategy: str = "lic_joint", penalty="log_n",
           full_fit: FitResult | None = None, forced=(0, 0, 0), symmetrize: bool = False,
           opts: FitOptions | None = None, workers: int | None = 1) -> SelectionResult:
    """Pick the support with the smallest criterion and refit it.

    Ties go to fewer parameters, then to the lexicographically smaller mask.
    """
    strategy = strategy.lower().replace("-", "_")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    terms = search_terms(data, model, (strategy,), full_fit, forced, symmetrize, opts,
                         workers=workers)
    chosen, values = terms.choose(strategy, penalty)
    infeasible = tuple((v.support, "infeasible") for v in values if not v.feasible)
    full = terms.full
    if chosen.is_full:
        refit, refit_sw = full.fit, full.sandwich
    else:
        ref = _refit(full.packed, model, full.fit.theta, chosen, COMPONENTS, opts or FitOptions())
        refit, refit_sw = ref.fit, ref.sandwich
    return SelectionResult(
        strategy=strategy,
        penalty=penalty_name(penalty),
        penalty_scale=penalty_value(penalty, full.n),
        chosen=chosen,
        criteria=tuple(values),
        refit=refit,
        refit_sandwich=refit_sw,
        infeasible=infeasible,
    )
