"""Domain types for clustered data under a joint mean-scale-correlation model.

Each cluster ``i`` carries a response vector ``y`` of length ``m`` and three
design matrices:

* ``X1`` (m x p) for the mean,        ``g1(mu)  = X1 @ beta``
* ``X2`` (m x r) for the scale,       ``g2(phi) = X2 @ lam``
* ``X3`` (m(m-1)/2 x q) for the pairwise correlations, ``g3(rho) = X3 @ gamma``

The variance of a unit is ``phi * v(mu)`` for a known variance function ``v``.
Rows of ``X3`` follow the upper-triangle pair order (1,2), (1,3), ..., (m-1,m).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache, partial
from typing import Callable, Sequence

import numpy as np

from .exceptions import DivergenceError

RHO_CLAMP = 0.99


def pair_indices(m: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-based ``(j, k)`` index arrays of the within-cluster pairs, j < k."""
    return _pair_indices(int(m))


@lru_cache(maxsize=64)
def _pair_indices(m: int) -> tuple[np.ndarray, np.ndarray]:
    jj, kk = np.triu_indices(m, 1)
    jj.setflags(write=False)
    kk.setflags(write=False)
    return jj, kk


def n_pairs(m: int) -> int:
    return m * (m - 1) // 2


# ---------------------------------------------------------------------------
# links
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Link:
    """A link ``g`` with its inverse and the first two derivatives of the inverse."""

    name: str
    forward: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    inverse: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    dinverse: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    d2inverse: Callable[[np.ndarray], np.ndarray] = field(repr=False)

    def __reduce__(self):
        return get_link, (self.name,)


def _identity(x):
    return np.asarray(x, dtype=float)


def _ones(eta):
    return np.ones_like(eta, dtype=float)


def _zeros(eta):
    return np.zeros_like(eta, dtype=float)


def _tanh_d1(eta):
    t = np.tanh(eta)
    return 1.0 - t * t


def _tanh_d2(eta):
    t = np.tanh(eta)
    return -2.0 * t * (1.0 - t * t)


IDENTITY = Link("identity", _identity, _identity, _ones, _zeros)
LOG = Link("log", np.log, np.exp, np.exp, np.exp)
FISHER_Z = Link("fisher-z", np.arctanh, np.tanh, _tanh_d1, _tanh_d2)

LINKS = {link.name: link for link in (IDENTITY, LOG, FISHER_Z)}
_ALLOWED = {
    "mean": ("identity", "log"),
    "scale": ("log", "identity"),
    "corr": ("identity", "fisher-z"),
}


def get_link(name: str | Link) -> Link:
    if isinstance(name, Link):
        return name
    key = name.lower().replace("_", "-")
    if key in ("fisherz", "atanh"):
        key = "fisher-z"
    try:
        return LINKS[key]
    except KeyError:
        raise ValueError(f"unknown link {name!r}; choose from {sorted(LINKS)}") from None


@dataclass(frozen=True)
class LinkSpec:
    """Links for the mean (g1), scale (g2) and correlation (g3) regressions."""

    mean: Link = IDENTITY
    scale: Link = LOG
    corr: Link = IDENTITY

    def __post_init__(self):
        for part in ("mean", "scale", "corr"):
            link = get_link(getattr(self, part))
            if link.name not in _ALLOWED[part]:
                raise ValueError(f"{link.name} link is not available for the {part} model")
            object.__setattr__(self, part, link)

    @classmethod
    def from_names(cls, mean="identity", scale="log", corr="identity") -> LinkSpec:
        return cls(get_link(mean), get_link(scale), get_link(corr))

    def names(self) -> dict[str, str]:
        return {"mean": self.mean.name, "scale": self.scale.name, "corr": self.corr.name}


# ---------------------------------------------------------------------------
# variance functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VarianceFunction:
    """Mean-variance relation ``v(mu)`` and its derivative."""

    kind: str
    v: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    dv: Callable[[np.ndarray], np.ndarray] = field(repr=False)

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant-one"


def constant_one() -> VarianceFunction:
    return VarianceFunction("constant-one", v=_ones, dv=_zeros)


def _tanh_shift_v(mu, amplitude):
    return 1.0 + amplitude * np.tanh(mu)


def _tanh_shift_dv(mu, amplitude):
    t = np.tanh(mu)
    return amplitude * (1.0 - t * t)


def tanh_shift(amplitude: float = 0.35) -> VarianceFunction:
    """``v(mu) = 1 + amplitude * tanh(mu)``; positive for ``|amplitude| < 1``."""
    if not abs(amplitude) < 1:
        raise ValueError("tanh-shift amplitude must lie in (-1, 1)")
    return VarianceFunction(
        "tanh-shift",
        v=partial(_tanh_shift_v, amplitude=amplitude),
        dv=partial(_tanh_shift_dv, amplitude=amplitude),
    )


def custom_variance(v, dv) -> VarianceFunction:
    return VarianceFunction("custom", v=v, dv=dv)


def get_variance_function(name: str | VarianceFunction) -> VarianceFunction:
    if isinstance(name, VarianceFunction):
        return name
    key = name.lower().replace("_", "-")
    if key in ("constant-one", "constant", "one"):
        return constant_one()
    if key in ("tanh-shift", "tanh"):
        return tanh_shift()
    raise ValueError(f"unknown variance function {name!r}")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThetaVector:
    """Regression coefficients ``(beta, lam, gamma)``; ``stacked`` concatenates them."""

    beta: np.ndarray
    lam: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        for name in ("beta", "lam", "gamma"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.beta.size, self.lam.size, self.gamma.size

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.beta, self.lam, self.gamma])

    @classmethod
    def from_stacked(cls, vec, p: int, r: int, q: int) -> ThetaVector:
        vec = np.asarray(vec, dtype=float).reshape(-1)
        if vec.size != p + r + q:
            raise ValueError(f"expected {p + r + q} entries, got {vec.size}")
        return cls(vec[:p], vec[p : p + r], vec[p + r :])

    def component(self, name: str) -> np.ndarray:
        return {"mean": self.beta, "scale": self.lam, "corr": self.gamma}[name]

    def replace(self, name: str, value) -> ThetaVector:
        parts = {"mean": self.beta, "scale": self.lam, "corr": self.gamma}
        parts[name] = value
        return ThetaVector(parts["mean"], parts["scale"], parts["corr"])


COMPONENTS = ("mean", "scale", "corr")


# ---------------------------------------------------------------------------
# working structures for V2 and V3
# ---------------------------------------------------------------------------


def _parse_structure(spec) -> tuple[str, float]:
    if isinstance(spec, tuple):
        kind, u = spec
    else:
        text = str(spec).lower()
        if ":" in text:
            kind, u = text.split(":", 1)
        elif "(" in text:
            kind, u = text.rstrip(")").split("(", 1)
        else:
            kind, u = text, 0.0
    kind = kind.strip().lower()
    if kind in ("ind", "independence"):
        kind = "identity"
    if kind in ("exchangeable",):
        kind = "cs"
    if kind not in ("identity", "cs", "ar1"):
        raise ValueError(f"unknown working correlation {spec!r}")
    u = float(u)
    if kind != "identity" and not -1 < u < 1:
        raise ValueError(f"working parameter must lie in (-1, 1), got {u}")
    return kind, (0.0 if kind == "identity" else u)


@lru_cache(maxsize=256)
def structure_matrix(kind: str, u: float, size: int) -> np.ndarray:
    """Working correlation of the given kind and dimension (read-only)."""
    if kind == "identity" or size <= 1:
        mat = np.eye(size)
    elif kind == "cs":
        mat = np.full((size, size), u)
        np.fill_diagonal(mat, 1.0)
    else:
        lag = np.abs(np.subtract.outer(np.arange(size), np.arange(size)))
        mat = u**lag
    if size and np.linalg.eigvalsh(mat)[0] <= 0:
        raise ValueError(f"{kind}({u}) is not positive definite at dimension {size}")
    mat.setflags(write=False)
    return mat


@lru_cache(maxsize=256)
def structure_inverse(kind: str, u: float, size: int) -> np.ndarray:
    inv = np.linalg.inv(structure_matrix(kind, u, size)) if size else np.eye(0)
    inv = 0.5 * (inv + inv.T)
    inv.setflags(write=False)
    return inv


@dataclass(frozen=True)
class WorkingStructure:
    """Working correlations ``R2`` (over units) and ``R3`` (over stacked pairs).

    ``v3_mode`` is ``"delta-scaled"`` for ``V3 = D^1/2 R3 D^1/2`` with
    ``D = diag(1 + rho^2)``, or ``"plain-identity"`` for ``V3 = R3``.
    """

    r2: tuple[str, float] = ("identity", 0.0)
    r3: tuple[str, float] = ("identity", 0.0)
    v3_mode: str = "delta-scaled"

    def __post_init__(self):
        object.__setattr__(self, "r2", _parse_structure(self.r2))
        object.__setattr__(self, "r3", _parse_structure(self.r3))
        mode = self.v3_mode.lower().replace("_", "-")
        if mode not in ("delta-scaled", "plain-identity"):
            raise ValueError(f"unknown v3_mode {self.v3_mode!r}")
        object.__setattr__(self, "v3_mode", mode)

    def r2_matrix(self, m: int) -> np.ndarray:
        return structure_matrix(*self.r2, m)

    def r3_matrix(self, m: int) -> np.ndarray:
        return structure_matrix(*self.r3, n_pairs(m))

    def describe(self) -> dict:
        fmt = lambda s: s[0] if s[0] == "identity" else f"{s[0]}:{s[1]:g}"  # noqa: E731
        return {"r2": fmt(self.r2), "r3": fmt(self.r3), "v3_mode": self.v3_mode}


@dataclass(frozen=True)
class ModelSpec:
    """Everything about the model except the data and the coefficients."""

    links: LinkSpec = field(default_factory=LinkSpec)
    variance: VarianceFunction = field(default_factory=constant_one)
    working: WorkingStructure = field(default_factory=WorkingStructure)

    def with_variance(self, vf: VarianceFunction) -> ModelSpec:
        return ModelSpec(self.links, vf, self.working)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(0, 0)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Cluster:
    id: int
    y: np.ndarray
    X1: np.ndarray
    X2: np.ndarray
    X3: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "id", int(self.id))
        y = _frozen(self.y, 1, "y")
        object.__setattr__(self, "y", y)
        m = y.size
        if m < 1:
            raise ValueError(f"cluster {self.id}: empty response")
        for name in ("X1", "X2"):
            X = _frozen(getattr(self, name), 2, name)
            if X.shape[0] != m:
                raise ValueError(f"cluster {self.id}: {name} has {X.shape[0]} rows, expected {m}")
            object.__setattr__(self, name, X)
        X3 = np.array(self.X3, dtype=float)
        if X3.ndim == 1 and X3.size == 0:
            X3 = X3.reshape(0, 0)
        if X3.ndim != 2 or X3.shape[0] != n_pairs(m):
            raise ValueError(
                f"cluster {self.id}: X3 must have {n_pairs(m)} pair rows, got shape {X3.shape}"
            )
        X3.setflags(write=False)
        object.__setattr__(self, "X3", X3)

    @property
    def m(self) -> int:
        return self.y.size


@dataclass(frozen=True)
class SizeGroup:
    """Clusters of one size stacked along a leading axis, sorted by cluster id."""

    m: int
    ids: np.ndarray
    y: np.ndarray  # (g, m)
    X1: np.ndarray  # (g, m, p)
    X2: np.ndarray  # (g, m, r)
    X3: np.ndarray  # (g, P, q)

    @property
    def size(self) -> int:
        return self.ids.size

    def restrict(self, mean_mask, scale_mask, corr_mask) -> SizeGroup:
        return SizeGroup(
            self.m,
            self.ids,
            self.y,
            self.X1[:, :, mean_mask],
            self.X2[:, :, scale_mask],
            self.X3[:, :, corr_mask],
        )


@dataclass(frozen=True)
class PackedData:
    groups: tuple[SizeGroup, ...]
    n: int
    p: int
    r: int
    q: int

    def restrict(self, mean_mask, scale_mask, corr_mask) -> PackedData:
        masks = [np.asarray(mk, dtype=bool) for mk in (mean_mask, scale_mask, corr_mask)]
        groups = tuple(g.restrict(*masks) for g in self.groups)
        return PackedData(groups, self.n, *(int(mk.sum()) for mk in masks))


@dataclass(frozen=True)
class ClusterDataset:
    clusters: tuple[Cluster, ...]

    def __post_init__(self):
        clusters = tuple(self.clusters)
        if not clusters:
            raise ValueError("a dataset needs at least one cluster")
        dims = {(c.X1.shape[1], c.X2.shape[1], c.X3.shape[1] if c.m > 1 else None) for c in clusters}
        pr = {d[:2] for d in dims}
        qs = {d[2] for d in dims if d[2] is not None}
        if len(pr) != 1 or len(qs) > 1:
            raise ValueError("all clusters must share the same p, r, q column dimensions")
        ids = [c.id for c in clusters]
        if len(set(ids)) != len(ids):
            raise ValueError("cluster ids must be unique")
        object.__setattr__(self, "clusters", clusters)

    @property
    def n(self) -> int:
        return len(self.clusters)

    @property
    def p(self) -> int:
        return self.clusters[0].X1.shape[1]

    @property
    def r(self) -> int:
        return self.clusters[0].X2.shape[1]

    @property
    def q(self) -> int:
        for c in self.clusters:
            if c.m > 1:
                return c.X3.shape[1]
        return self.clusters[0].X3.shape[1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.p, self.r, self.q

    @cached_property
    def packed(self) -> PackedData:
        q = self.q
        by_size: dict[int, list[Cluster]] = {}
        for c in sorted(self.clusters, key=lambda c: c.id):
            by_size.setdefault(c.m, []).append(c)
        groups = []
        for m in sorted(by_size):
            cs = by_size[m]
            X3 = np.stack([c.X3 if c.X3.shape[1] == q else np.zeros((0, q)) for c in cs])
            groups.append(
                SizeGroup(
                    m,
                    np.array([c.id for c in cs]),
                    np.stack([c.y for c in cs]),
                    np.stack([c.X1 for c in cs]),
                    np.stack([c.X2 for c in cs]),
                    X3.reshape(len(cs), n_pairs(m), q),
                )
            )
        return PackedData(tuple(groups), self.n, self.p, self.r, q)

    @property
    def n_units(self) -> int:
        return sum(c.m for c in self.clusters)

    @property
    def n_pairs(self) -> int:
        return sum(n_pairs(c.m) for c in self.clusters)


def make_dataset(clusters: Sequence[Cluster]) -> ClusterDataset:
    return ClusterDataset(tuple(clusters))


# ---------------------------------------------------------------------------
# marginal moments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Marginals:
    mu: np.ndarray
    phi: np.ndarray
    rho: np.ndarray
    v: np.ndarray
    clamped: int = 0


def linear_predictors(X1, X2, X3, theta: ThetaVector):
    eta1 = X1 @ theta.beta
    eta2 = X2 @ theta.lam
    eta3 = X3 @ theta.gamma
    if not (np.isfinite(eta1).all() and np.isfinite(eta2).all() and np.isfinite(eta3).all()):
        raise DivergenceError("divergent linear predictor")
    return eta1, eta2, eta3


def clamp_correlation(rho: np.ndarray, links: LinkSpec) -> tuple[np.ndarray, int]:
    """Clip identity-link correlations into [-0.99, 0.99]; returns the clip count."""
    if links.corr is not IDENTITY:
        return rho, 0
    over = np.abs(rho) > RHO_CLAMP
    count = int(over.sum())
    if count:
        rho = np.clip(rho, -RHO_CLAMP, RHO_CLAMP)
    return rho, count


def evaluate_marginals(
    cluster: Cluster, theta: ThetaVector, links: LinkSpec, vf: VarianceFunction
) -> Marginals:
    """Mean, scale, correlation and variance-function values for one cluster."""
    if theta.dims[:2] != (cluster.X1.shape[1], cluster.X2.shape[1]) or (
        cluster.m > 1 and theta.dims[2] != cluster.X3.shape[1]
    ):
        raise ValueError(f"theta dimensions {theta.dims} do not match cluster {cluster.id}")
    X3 = cluster.X3 if cluster.m > 1 else np.zeros((0, theta.dims[2]))
    eta1, eta2, eta3 = linear_predictors(cluster.X1, cluster.X2, X3, theta)
    mu = links.mean.inverse(eta1)
    phi = links.scale.inverse(eta2)
    if not (np.isfinite(phi).all() and (phi > 0).all()):
        raise DivergenceError(f"non-positive scale in cluster {cluster.id}")
    rho, clamped = clamp_correlation(links.corr.inverse(eta3), links)
    return Marginals(mu, phi, rho, vf.v(mu), clamped)
