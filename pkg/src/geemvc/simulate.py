"""Scenario generators and Monte-Carlo replicate studies.

Scenarios reproduce the parameter-estimation study (``est-I``, ``est-II``) and
the three model-selection studies (``sel-I``, ``sel-II``, ``sel-III``).
``diag-lp`` mimics the older design with normally distributed pair covariates
and small correlations centred at zero; it is used by the block diagnostics.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .fitter import FitOptions, FitResult, fit
from .model import (
    COMPONENTS,
    Cluster,
    ClusterDataset,
    LinkSpec,
    ModelSpec,
    ThetaVector,
    WorkingStructure,
    constant_one,
    get_link,
    get_variance_function,
    n_pairs,
    pair_indices,
)
from .exceptions import GEEError
from .parallel import ordered_map
from .selection import penalty_name, search_terms
from .variance import block_diagnostics, sandwich

log = logging.getLogger(__name__)

Z975 = float(stats.norm.ppf(0.975))
MAX_RESAMPLES = 100


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    true_theta: ThetaVector
    n_clusters: int = 300
    replicates: int = 200
    seed: int = 0
    vf_kind: str = "constant-one"
    cluster_size_rule: str = "fixed4"
    corr_design: str = "toeplitz"
    corr_link: str = "identity"
    covariate_cs: float = 0.5
    pair_cs: float = 0.3

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be positive")
        if self.cluster_size_rule not in ("fixed4", "binomial"):
            raise ValueError(f"unknown cluster size rule {self.cluster_size_rule!r}")
        if self.corr_design not in ("toeplitz", "cs-normal"):
            raise ValueError(f"unknown correlation design {self.corr_design!r}")

    @property
    def model(self) -> ModelSpec:
        """The correctly specified model, with identity working R2 and R3."""
        return ModelSpec(
            LinkSpec.from_names("identity", "log", self.corr_link),
            get_variance_function(self.vf_kind),
            WorkingStructure(),
        )

    @property
    def forced(self) -> tuple:
        """Columns kept in every candidate.

        The first mean and scale columns are intercepts.  The first lag
        indicator plays the same role in the Toeplitz design; the normal pair
        covariates have no such column, so nothing is kept there.
        """
        return (0, 0, () if self.corr_design == "cs-normal" else 0)

    @property
    def truth_support(self) -> dict[str, np.ndarray]:
        return {c: self.true_theta.component(c) != 0 for c in COMPONENTS}


_EST = dict(beta=(0.0, -1.0, 0.5), lam=(2.0, 1.0, -1.0), gamma=(0.5, 0.25, 0.125))
_SEL = dict(beta=(1.0, -1.0, 0.0), lam=(2.0, 1.0, 0.0))

SCENARIOS = {
    "est-I": dict(theta=_EST, vf_kind="constant-one"),
    "est-II": dict(theta=_EST, vf_kind="tanh-shift"),
    "sel-I": dict(
        theta=dict(_SEL, gamma=(0.2, -0.2, 0.0)),
        vf_kind="constant-one",
        cluster_size_rule="binomial",
        corr_design="cs-normal",
        corr_link="fisher-z",
    ),
    "sel-II": dict(theta=dict(_SEL, gamma=(0.5, 0.5, 0.0)), vf_kind="tanh-shift"),
    "sel-III": dict(theta=dict(_SEL, gamma=(0.5, 0.5, 0.0)), vf_kind="constant-one"),
    "diag-lp": dict(
        theta=dict(_SEL, gamma=(0.1, -0.2, 0.15)),
        vf_kind="constant-one",
        cluster_size_rule="binomial",
        corr_design="cs-normal",
        corr_link="fisher-z",
    ),
}


def scenario_config(name: str, **overrides) -> ScenarioConfig:
    try:
        base = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    t = base["theta"]
    kwargs = {k: v for k, v in base.items() if k != "theta"}
    kwargs["true_theta"] = ThetaVector(t["beta"], t["lam"], t["gamma"])
    kwargs.update(overrides)
    return ScenarioConfig(scenario=name, **kwargs)


# ---------------------------------------------------------------------------
# data generation
# ---------------------------------------------------------------------------


def _cs_chol(dim: int, u: float) -> np.ndarray:
    mat = np.full((dim, dim), u)
    np.fill_diagonal(mat, 1.0)
    return np.linalg.cholesky(mat)


def toeplitz_design(m: int, q: int = 3) -> np.ndarray:
    """Lag indicators: the pair (j, k) gets a one in column ``|j - k| - 1``."""
    jj, kk = pair_indices(m)
    X3 = np.zeros((n_pairs(m), q))
    lag = kk - jj
    rows = np.nonzero(lag <= q)[0]
    X3[rows, lag[rows] - 1] = 1.0
    return X3


def _pair_norm_bound(config: ScenarioConfig, m: int) -> float:
    f = get_link(config.corr_link).forward
    edge = 0.9 / (m - 1)
    gnorm = float(np.linalg.norm(config.true_theta.gamma))
    if gnorm == 0:
        return np.inf
    return float(min(abs(f(-edge)), abs(f(edge)))) / gnorm


def _normal_pairs(rng: np.random.Generator, config: ScenarioConfig, m: int) -> np.ndarray:
    """Pair covariates from N(0, CS) kept only inside the positive-definiteness ball."""
    q = config.true_theta.gamma.size
    L = _cs_chol(q, config.pair_cs)
    need = n_pairs(m)
    bound = _pair_norm_bound(config, m)
    kept: list[np.ndarray] = []
    have = 0
    batch = max(64, 4 * need)
    while have < need:
        h = rng.standard_normal((batch, q)) @ L.T
        h = h[np.linalg.norm(h, axis=1) <= bound]
        kept.append(h)
        have += h.shape[0]
        batch = min(batch * 2, 1 << 16)
    return np.concatenate(kept)[:need]


def cluster_size(rng: np.random.Generator, config: ScenarioConfig) -> int:
    if config.cluster_size_rule == "fixed4":
        return 4
    while True:
        m = int(rng.binomial(10, 0.7))
        if m >= 2:
            return m


def generate_cluster(rng: np.random.Generator, config: ScenarioConfig, cid: int = 0) -> Cluster:
    """One cluster drawn from the scenario's mean-scale-correlation model.

    The two covariates are drawn from a bivariate normal with compound-symmetry
    correlation and are used for both the mean and the scale regressions.
    """
    model = config.model
    theta = config.true_theta
    m = cluster_size(rng, config)
    x = rng.standard_normal((m, 2)) @ _cs_chol(2, config.covariate_cs).T
    X1 = np.column_stack([np.ones(m), x])
    X2 = X1.copy()
    mu = model.links.mean.inverse(X1 @ theta.beta)
    sd = np.sqrt(model.links.scale.inverse(X2 @ theta.lam) * model.variance.v(mu))
    jj, kk = pair_indices(m)
    for _ in range(MAX_RESAMPLES):
        if config.corr_design == "toeplitz":
            X3 = toeplitz_design(m, theta.gamma.size)
        else:
            X3 = _normal_pairs(rng, config, m)
        rho = model.links.corr.inverse(X3 @ theta.gamma)
        R = np.eye(m)
        R[jj, kk] = rho
        R[kk, jj] = rho
        try:
            L = np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            if config.corr_design == "toeplitz":
                raise ValueError("Toeplitz correlation is not positive definite") from None
            continue
        break
    else:
        raise ValueError(f"no positive-definite correlation after {MAX_RESAMPLES} resamples")
    y = mu + sd * (L @ rng.standard_normal(m))
    return Cluster(cid, y, X1, X2, X3)


def generate_dataset(config: ScenarioConfig, rng: np.random.Generator) -> ClusterDataset:
    return ClusterDataset(tuple(generate_cluster(rng, config, i) for i in range(config.n_clusters)))


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream keyed by ``(seed, replicate index)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)]))


def replicate_dataset(config: ScenarioConfig, index: int) -> ClusterDataset:
    return generate_dataset(config, replicate_rng(config.seed, index))


# ---------------------------------------------------------------------------
# replicate studies
# ---------------------------------------------------------------------------


def parameter_names(p: int, r: int, q: int) -> list[str]:
    return (
        [f"beta{i}" for i in range(p)]
        + [f"lambda{i}" for i in range(r)]
        + [f"gamma{i}" for i in range(q)]
    )


def lp_constant_variance_fit(data, model: ModelSpec, opts: FitOptions | None = None) -> FitResult:
    """Fit with the variance function forced to one, whatever generated the data.

    This is the comparator that regresses the variance directly on the scale
    covariates, so any mean dependence of the variance is absorbed into ``lam``.
    """
    return fit(data, replace(model, variance=constant_one()), opts)


@dataclass(frozen=True)
class CoverageSummary:
    """EST / ESE / ASE / CP of one estimator across the converged replicates."""

    est_mean: np.ndarray
    ese: np.ndarray
    ase: np.ndarray
    cp: np.ndarray
    n_used: int


def coverage_summary(truth: np.ndarray, est: np.ndarray, se: np.ndarray) -> CoverageSummary:
    est = np.asarray(est, dtype=float).reshape(-1, truth.size)
    se = np.asarray(se, dtype=float).reshape(-1, truth.size)
    k = est.shape[0]
    if k == 0:
        nan = np.full(truth.size, np.nan)
        return CoverageSummary(nan, nan, nan, nan, 0)
    ese = est.std(axis=0, ddof=1) if k > 1 else np.zeros(truth.size)
    covered = np.abs(est - truth) <= Z975 * se
    return CoverageSummary(est.mean(axis=0), ese, se.mean(axis=0), 100.0 * covered.mean(axis=0), k)


@dataclass(frozen=True)
class ReplicateSummary:
    scenario: str
    names: tuple[str, ...]
    truth: np.ndarray
    replicates: int
    convergence_rate: float
    est_mean: np.ndarray | None = None
    ese: np.ndarray | None = None
    ase_yf: np.ndarray | None = None
    ase_lp: np.ndarray | None = None
    cp_yf: np.ndarray | None = None
    cp_lp: np.ndarray | None = None
    comparator: CoverageSummary | None = None
    selection_counts: dict = field(default_factory=dict)
    n_selection: int = 0

    def selection_rates(self) -> dict:
        """Percent correct per (method, penalty) and component, plus ``all``."""
        denom = max(self.n_selection, 1)
        return {
            key: {c: 100.0 * v / denom for c, v in counts.items()}
            for key, counts in self.selection_counts.items()
        }

    def estimation_rows(self) -> list[dict]:
        if self.est_mean is None:
            return []
        rows = []
        for i, name in enumerate(self.names):
            row = dict(
                parameter=name,
                truth=float(self.truth[i]),
                est=float(self.est_mean[i]),
                ese=float(self.ese[i]),
                ase_yf=float(self.ase_yf[i]),
                cp_yf=float(self.cp_yf[i]),
                ase_lp=float(self.ase_lp[i]),
                cp_lp=float(self.cp_lp[i]),
            )
            if self.comparator is not None:
                row.update(
                    lp_fit_est=float(self.comparator.est_mean[i]),
                    lp_fit_ese=float(self.comparator.ese[i]),
                    lp_fit_ase=float(self.comparator.ase[i]),
                    lp_fit_cp=float(self.comparator.cp[i]),
                )
            rows.append(row)
        return rows

    def selection_rows(self) -> list[dict]:
        rows = []
        for (method, pen), rates in self.selection_rates().items():
            rows.append(dict(method=method, penalty=pen, **{c: rates[c] for c in (*COMPONENTS, "all")}))
        return rows

    def to_dict(self) -> dict:
        out = dict(
            scenario=self.scenario,
            replicates=self.replicates,
            convergence_rate=self.convergence_rate,
        )
        if self.est_mean is not None:
            out["estimation"] = self.estimation_rows()
        if self.selection_counts:
            out["selection"] = self.selection_rows()
            out["selection_replicates"] = self.n_selection
        return out


def _estimation_replicate(config: ScenarioConfig, comparator: bool, index: int) -> dict:
    data = replicate_dataset(config, index)
    model = config.model
    out: dict = {"converged": False, "comparator": None}
    try:
        res = fit(data, model)
        if res.converged:
            sw = sandwich(data, res.theta, model)
            out.update(converged=True, theta=res.theta.stacked, se_yf=sw.se_yf, se_lp=sw.se_lp)
    except (GEEError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.info("replicate %d failed: %s", index, exc)
    if comparator:
        try:
            lp = lp_constant_variance_fit(data, model)
            if lp.converged:
                sw = sandwich(data, lp.theta, replace(model, variance=constant_one()))
                out["comparator"] = (lp.theta.stacked, sw.se_lp)
        except (GEEError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.info("replicate %d comparator failed: %s", index, exc)
    return out


def run_estimation_study(
    config: ScenarioConfig,
    comparator: bool | None = None,
    workers: int | None = None,
) -> ReplicateSummary:
    """Fit every replicate and summarise both sandwich flavours.

    ``comparator`` adds the constant-variance fit with the block-diagonal
    sandwich; by default it is on when the generating variance is not constant.
    """
    if comparator is None:
        comparator = config.vf_kind != "constant-one"
    truth = config.true_theta.stacked
    names = tuple(parameter_names(*config.true_theta.dims))
    task = functools.partial(_estimation_replicate, config, comparator)
    records = ordered_map(task, range(config.replicates), workers)
    ok = [r for r in records if r["converged"]]
    yf = coverage_summary(truth, [r["theta"] for r in ok], [r["se_yf"] for r in ok])
    lp = coverage_summary(truth, [r["theta"] for r in ok], [r["se_lp"] for r in ok])
    comp = None
    if comparator:
        pairs = [r["comparator"] for r in records if r["comparator"] is not None]
        comp = coverage_summary(truth, [t for t, _ in pairs], [s for _, s in pairs])
    return ReplicateSummary(
        scenario=config.scenario,
        names=names,
        truth=truth,
        replicates=config.replicates,
        convergence_rate=len(ok) / max(config.replicates, 1),
        est_mean=yf.est_mean,
        ese=yf.ese,
        ase_yf=yf.ase,
        ase_lp=lp.ase,
        cp_yf=yf.cp,
        cp_lp=lp.cp,
        comparator=comp,
    )


SELECTION_METHODS = ("lic_joint", "lic_marginal", "qic_yf", "qic_lp")
PENALTIES = ("log_n", "two")


def _selection_replicate(config: ScenarioConfig, methods: tuple, penalties: tuple, index: int):
    data = replicate_dataset(config, index)
    truth = config.truth_support
    try:
        terms = search_terms(data, config.model, methods, forced=config.forced)
    except (GEEError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.info("replicate %d failed: %s", index, exc)
        return None
    out = {}
    for method in methods:
        for pen in penalties:
            try:
                chosen, _ = terms.choose(method, pen)
            except GEEError:
                out[(method, pen)] = {c: False for c in (*COMPONENTS, "all")}
                continue
            hits = {c: bool(np.array_equal(np.array(chosen.mask(c)), truth[c])) for c in COMPONENTS}
            hits["all"] = all(hits.values())
            out[(method, pen)] = hits
    return out


def run_selection_study(
    config: ScenarioConfig,
    methods=SELECTION_METHODS,
    penalties=PENALTIES,
    workers: int | None = None,
) -> ReplicateSummary:
    """Run each method and penalty on every replicate and count correct supports.

    A component is correct when the chosen support equals the nonzero pattern
    of the truth; ``all`` requires all three.
    """
    methods = tuple(m.lower().replace("-", "_") for m in methods)
    bad = set(methods) - set(SELECTION_METHODS)
    if bad:
        raise ValueError(f"unknown selection methods {sorted(bad)}")
    penalties = tuple(penalty_name(p) for p in penalties)
    truth = config.true_theta.stacked
    names = tuple(parameter_names(*config.true_theta.dims))
    if not methods or not penalties:
        return ReplicateSummary(config.scenario, names, truth, config.replicates, 1.0)
    task = functools.partial(_selection_replicate, config, methods, penalties)
    records = ordered_map(task, range(config.replicates), workers)
    ok = [r for r in records if r is not None]
    counts = {
        (m, p): {c: sum(r[(m, p)][c] for r in ok) for c in (*COMPONENTS, "all")}
        for m in methods
        for p in penalties
    }
    return ReplicateSummary(
        scenario=config.scenario,
        names=names,
        truth=truth,
        replicates=config.replicates,
        convergence_rate=len(ok) / max(config.replicates, 1),
        selection_counts=counts,
        n_selection=len(ok),
    )


@dataclass(frozen=True)
class DiagnosticSummary:
    """Replicate averages of :func:`geemvc.variance.block_diagnostics`."""

    scenario: str
    replicates: int
    scaled_e: float
    norm_b: float
    norm_d: float
    norm_e: float
    rho_mean: float
    rho_counts: np.ndarray
    rho_edges: np.ndarray

    def to_dict(self) -> dict:
        return dict(
            scenario=self.scenario,
            replicates=self.replicates,
            scaled_e=self.scaled_e,
            norm_b=self.norm_b,
            norm_d=self.norm_d,
            norm_e=self.norm_e,
            rho_mean=self.rho_mean,
            rho_histogram=[
                dict(lower=float(a), upper=float(b), count=int(c))
                for a, b, c in zip(self.rho_edges[:-1], self.rho_edges[1:], self.rho_counts)
            ],
        )


def _diagnostic_replicate(config: ScenarioConfig, index: int):
    data = replicate_dataset(config, index)
    try:
        res = fit(data, config.model)
    except (GEEError, FloatingPointError, np.linalg.LinAlgError):
        return None
    if not res.converged:
        return None
    return block_diagnostics(data, res.theta, config.model)


def run_diagnostic_study(config: ScenarioConfig, workers: int | None = None) -> DiagnosticSummary:
    task = functools.partial(_diagnostic_replicate, config)
    diags = [d for d in ordered_map(task, range(config.replicates), workers) if d]
    if not diags:
        raise GEEError("no replicate converged")
    counts = np.sum([d.rho_counts for d in diags], axis=0)
    # the pooled mean weights replicates by their number of pairs
    pooled = [d.rho_mean * d.rho_counts.sum() for d in diags]
    return DiagnosticSummary(
        scenario=config.scenario,
        replicates=len(diags),
        scaled_e=float(np.mean([d.scaled_e for d in diags])),
        norm_b=float(np.mean([d.norm_b for d in diags])),
        norm_d=float(np.mean([d.norm_d for d in diags])),
        norm_e=float(np.mean([d.norm_e for d in diags])),
        rho_mean=float(np.sum(pooled) / max(counts.sum(), 1)),
        rho_counts=counts,
        rho_edges=diags[0].rho_edges,
    )
