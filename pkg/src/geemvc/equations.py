"""Residual transforms, working covariances and the three estimating functions.

Two code paths live here.  ``cluster_quantities`` and
``score_residual_derivatives`` work on a single :class:`Cluster` and build every
matrix explicitly; they are the readable reference.  ``evaluate`` works on the
size-grouped arrays of :class:`PackedData`, never forms ``V`` itself and only
applies its inverse, and is what the fitter and the sandwich code call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import CovarianceRepairError, DivergenceError
from .model import (
    Cluster,
    ClusterDataset,
    ModelSpec,
    PackedData,
    SizeGroup,
    ThetaVector,
    clamp_correlation,
    evaluate_marginals,
    linear_predictors,
    n_pairs,
    pair_indices,
    structure_inverse,
)

PD_TOL = 1e-8
PD_FLOOR = 1e-6


def repair_pd(mat: np.ndarray) -> tuple[np.ndarray, bool]:
    """Floor the eigenvalues of a symmetric matrix at ``PD_FLOOR`` if any is below ``PD_TOL``."""
    mat = 0.5 * (mat + mat.T)
    if mat.size == 0:
        return mat, False
    w, Q = np.linalg.eigh(mat)
    if w[0] >= PD_TOL:
        return mat, False
    w = np.maximum(w, PD_FLOOR)
    fixed = (Q * w) @ Q.T
    if not np.isfinite(fixed).all():
        raise CovarianceRepairError("irreparable working covariance")
    return 0.5 * (fixed + fixed.T), True


def correlation_matrix(rho: np.ndarray, m: int) -> np.ndarray:
    """Unit-diagonal matrix with ``rho`` on the stacked upper-triangle pairs."""
    jj, kk = pair_indices(m)
    R = np.eye(m)
    R[jj, kk] = rho
    R[kk, jj] = rho
    return R


# ---------------------------------------------------------------------------
# single-cluster reference path
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClusterQuantities:
    eps: np.ndarray
    s: np.ndarray
    z: np.ndarray
    mu: np.ndarray
    phi: np.ndarray
    rho: np.ndarray
    v: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    D3: np.ndarray
    V1: np.ndarray
    V2: np.ndarray
    V3: np.ndarray
    repairs: int = 0
    clamped: int = 0


def cluster_quantities(cluster: Cluster, theta: ThetaVector, model: ModelSpec) -> ClusterQuantities:
    links, vf, ws = model.links, model.variance, model.working
    marg = evaluate_marginals(cluster, theta, links, vf)
    m = cluster.m
    jj, kk = pair_indices(m)
    X3 = cluster.X3 if m > 1 else np.zeros((0, theta.dims[2]))
    eta1, eta2, eta3 = linear_predictors(cluster.X1, cluster.X2, X3, theta)

    eps = cluster.y - marg.mu
    s = eps**2 / marg.v
    sd = np.sqrt(marg.phi * marg.v)
    z = eps[jj] * eps[kk] / (sd[jj] * sd[kk])

    D1 = links.mean.dinverse(eta1)[:, None] * cluster.X1
    D2 = links.scale.dinverse(eta2)[:, None] * cluster.X2
    D3 = links.corr.dinverse(eta3)[:, None] * X3

    repairs = 0
    R1, fixed = repair_pd(correlation_matrix(marg.rho, m))
    repairs += fixed
    V1 = sd[:, None] * R1 * sd[None, :]

    a2 = np.sqrt(2.0) * marg.phi
    V2, fixed = repair_pd(a2[:, None] * ws.r2_matrix(m) * a2[None, :])
    repairs += fixed

    if ws.v3_mode == "delta-scaled":
        a3 = np.sqrt(1.0 + marg.rho**2)
    else:
        a3 = np.ones(n_pairs(m))
    V3, fixed = repair_pd(a3[:, None] * ws.r3_matrix(m) * a3[None, :])
    repairs += fixed

    return ClusterQuantities(
        eps, s, z, marg.mu, marg.phi, marg.rho, marg.v, D1, D2, D3, V1, V2, V3,
        repairs=repairs, clamped=marg.clamped,
    )


def score_residual_derivatives(cluster: Cluster, theta: ThetaVector, model: ModelSpec):
    """Derivatives of ``s`` and ``z`` with respect to ``beta`` and of ``z`` w.r.t. ``lam``.

    Returns ``(dS_dbeta, dZ_dbeta, dZ_dlambda)`` with shapes ``(m, p)``,
    ``(m(m-1)/2, p)`` and ``(m(m-1)/2, r)``.
    """
    cq = cluster_quantities(cluster, theta, model)
    m = cluster.m
    jj, kk = pair_indices(m)
    eps, v, phi, D1, D2 = cq.eps, cq.v, cq.phi, cq.D1, cq.D2
    dv = model.variance.dv(cq.mu)

    dS = (-2.0 * eps * v - eps**2 * dv)[:, None] * D1 / (v**2)[:, None]

    root = np.sqrt(phi[jj] * v[jj] * phi[kk] * v[kk])
    prod = eps[jj] * eps[kk]
    dZb = (
        -D1[jj] * eps[kk][:, None]
        - D1[kk] * eps[jj][:, None]
        - 0.5 * prod[:, None] * ((dv / v)[jj][:, None] * D1[jj] + (dv / v)[kk][:, None] * D1[kk])
    ) / root[:, None]
    dZl = -(prod / (2.0 * root))[:, None] * (D2[jj] / phi[jj][:, None] + D2[kk] / phi[kk][:, None])
    return dS, dZb, dZl


# ---------------------------------------------------------------------------
# batched path
# ---------------------------------------------------------------------------


def _scaled_inverse(base_inv: np.ndarray | None, scale: np.ndarray):
    """Inverse of ``diag(a) R diag(a)`` as a diagonal vector or a stacked matrix.

    ``base_inv`` is ``R^-1`` (shared across the group) or ``None`` for ``R = I``.
    """
    inv_a = 1.0 / scale
    if base_inv is None:
        return inv_a * inv_a
    return inv_a[:, :, None] * base_inv[None] * inv_a[:, None, :]


def _apply(W: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``W @ M`` for a stacked diagonal (``W.ndim == 2``) or full weight."""
    if W.ndim == 2:
        return W[..., None] * M if M.ndim == 3 else W * M
    return W @ M if M.ndim == 3 else np.einsum("gjk,gk->gj", W, M)


def _inverse_r1(rho: np.ndarray, m: int) -> tuple[np.ndarray, int]:
    g = rho.shape[0]
    if m == 1:
        return np.ones((g, 1, 1)), 0
    jj, kk = pair_indices(m)
    R = np.zeros((g, m, m))
    R[:, jj, kk] = rho
    R[:, kk, jj] = rho
    idx = np.arange(m)
    R[:, idx, idx] = 1.0
    if g > 1 and np.all(rho == rho[0]):
        inv, repairs = _inverse_r1(rho[:1], m)
        return np.broadcast_to(inv, (g, m, m)), repairs * g
    try:
        # succeeds exactly when every eigenvalue is at least PD_TOL
        np.linalg.cholesky(R - PD_TOL * np.eye(m))
    except np.linalg.LinAlgError:
        pass
    else:
        return np.linalg.inv(R), 0
    w, Q = np.linalg.eigh(R)
    bad = w[:, 0] < PD_TOL
    repairs = int(bad.sum())
    if repairs:
        w = np.where(bad[:, None], np.maximum(w, PD_FLOOR), w)
    inv = (Q / w[:, None, :]) @ np.swapaxes(Q, 1, 2)
    if not np.isfinite(inv).all():
        raise CovarianceRepairError("irreparable working covariance")
    return inv, repairs


@dataclass
class GroupState:
    """Current moments of one size group; arrays have a leading cluster axis."""

    group: SizeGroup
    mu: np.ndarray
    dmu: np.ndarray
    v: np.ndarray
    dv: np.ndarray
    phi: np.ndarray
    dphi: np.ndarray
    rho: np.ndarray
    drho: np.ndarray
    eps: np.ndarray
    sd: np.ndarray
    clamped: int = 0
    _z: np.ndarray | None = field(default=None, repr=False)

    @property
    def s(self) -> np.ndarray:
        return self.eps**2 / self.v

    @property
    def z(self) -> np.ndarray:
        if self._z is None:
            jj, kk = pair_indices(self.group.m)
            e = self.eps / self.sd
            self._z = e[:, jj] * e[:, kk]
        return self._z

    @property
    def D1(self):
        return self.dmu[..., None] * self.group.X1

    @property
    def D2(self):
        return self.dphi[..., None] * self.group.X2

    @property
    def D3(self):
        return self.drho[..., None] * self.group.X3


def group_state(group: SizeGroup, theta: ThetaVector, model: ModelSpec) -> GroupState:
    links, vf = model.links, model.variance
    eta1, eta2, eta3 = linear_predictors(group.X1, group.X2, group.X3, theta)
    mu = links.mean.inverse(eta1)
    phi = links.scale.inverse(eta2)
    if not (np.isfinite(mu).all() and np.isfinite(phi).all() and (phi > 0).all()):
        raise DivergenceError("divergent linear predictor")
    rho, clamped = clamp_correlation(links.corr.inverse(eta3), links)
    v = vf.v(mu)
    if not (v > 0).all():
        raise DivergenceError("variance function is not positive at the current mean")
    return GroupState(
        group,
        mu=mu,
        dmu=links.mean.dinverse(eta1),
        v=v,
        dv=vf.dv(mu),
        phi=phi,
        dphi=links.scale.dinverse(eta2),
        rho=rho,
        drho=links.corr.dinverse(eta3),
        eps=group.y - mu,
        sd=np.sqrt(phi * v),
        clamped=clamped,
    )


def mean_weight(st: GroupState) -> tuple[np.ndarray, int]:
    """``V1^-1`` for every cluster in the group and the number of repaired ``R1``."""
    Rinv, repairs = _inverse_r1(st.rho, st.group.m)
    return Rinv / (st.sd[:, :, None] * st.sd[:, None, :]), repairs


def scale_weight(st: GroupState, model: ModelSpec) -> np.ndarray:
    kind, u = model.working.r2
    base = None if kind == "identity" else structure_inverse(kind, u, st.group.m)
    return _scaled_inverse(base, np.sqrt(2.0) * st.phi)


def corr_weight(st: GroupState, model: ModelSpec) -> np.ndarray:
    m = st.group.m
    kind, u = model.working.r3
    base = None if kind == "identity" else structure_inverse(kind, u, n_pairs(m))
    if model.working.v3_mode == "delta-scaled":
        a = np.sqrt(1.0 + st.rho**2)
    else:
        a = np.ones_like(st.rho)
    return _scaled_inverse(base, a)


def residual_derivatives(st: GroupState):
    """Batched ``(dS_dbeta, dZ_dbeta, dZ_dlambda)``; same formulas as the reference path."""
    jj, kk = pair_indices(st.group.m)
    D1, D2 = st.D1, st.D2
    eps, v, dv = st.eps, st.v, st.dv
    dS = ((-2.0 * eps * v - eps**2 * dv) / v**2)[..., None] * D1
    z = st.z
    inv_sd = 1.0 / st.sd
    dlogv = dv / v
    dZb = (
        -(D1[:, jj] * (eps[:, kk] * inv_sd[:, kk] * inv_sd[:, jj])[..., None])
        - D1[:, kk] * (eps[:, jj] * inv_sd[:, jj] * inv_sd[:, kk])[..., None]
        - 0.5 * z[..., None] * (dlogv[:, jj, None] * D1[:, jj] + dlogv[:, kk, None] * D1[:, kk])
    )
    G = D2 / st.phi[..., None]
    dZl = -0.5 * z[..., None] * (G[:, jj] + G[:, kk])
    return dS, dZb, dZl


def _flat_sum(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``sum_g A[g].T @ B[g]`` for stacked ``(g, k, a)`` and ``(g, k, b)``."""
    a, b = A.shape[-1], B.shape[-1]
    return A.reshape(-1, a).T @ B.reshape(-1, b)


@dataclass
class Evaluation:
    """Sums over clusters of the estimating functions and their slope blocks."""

    U: dict = field(default_factory=dict)
    slope: dict = field(default_factory=dict)
    cross: dict = field(default_factory=dict)
    contributions: dict = field(default_factory=dict)
    clamped: int = 0
    repairs: int = 0


def evaluate(
    packed: PackedData,
    theta: ThetaVector,
    model: ModelSpec,
    parts=("mean", "scale", "corr"),
    derivatives: bool = False,
    per_cluster: bool = False,
) -> Evaluation:
    """Estimating functions and diagonal slope blocks for the requested components.

    With ``derivatives`` the cross blocks ``B``, ``D`` and ``E`` are added (this
    needs all three components); with ``per_cluster`` the per-cluster
    contributions to each ``U`` are kept in cluster-id order within size groups.
    """
    dims = {"mean": packed.p, "scale": packed.r, "corr": packed.q}
    out = Evaluation()
    for part in parts:
        out.U[part] = np.zeros(dims[part])
        out.slope[part] = np.zeros((dims[part], dims[part]))
        if per_cluster:
            out.contributions[part] = []
    if derivatives:
        out.cross = {
            "B": np.zeros((packed.r, packed.p)),
            "D": np.zeros((packed.q, packed.p)),
            "E": np.zeros((packed.q, packed.r)),
        }

    for group in packed.groups:
        st = group_state(group, theta, model)
        out.clamped += st.clamped
        W2D2 = W3D3 = None
        if "mean" in parts:
            W1, rep = mean_weight(st)
            out.repairs += rep
            D1 = st.D1
            WD = W1 @ D1
            contrib = np.einsum("gjp,gj->gp", WD, st.eps)
            out.U["mean"] += contrib.sum(axis=0)
            out.slope["mean"] += _flat_sum(D1, WD)
            if per_cluster:
                out.contributions["mean"].append(contrib)
        if "scale" in parts:
            W2 = scale_weight(st, model)
            D2 = st.D2
            W2D2 = _apply(W2, D2)
            contrib = np.einsum("gjp,gj->gp", W2D2, st.s - st.phi)
            out.U["scale"] += contrib.sum(axis=0)
            out.slope["scale"] += _flat_sum(D2, W2D2)
            if per_cluster:
                out.contributions["scale"].append(contrib)
        if "corr" in parts:
            if group.m > 1:
                W3 = corr_weight(st, model)
                D3 = st.D3
                W3D3 = _apply(W3, D3)
                contrib = np.einsum("gjp,gj->gp", W3D3, st.z - st.rho)
                out.U["corr"] += contrib.sum(axis=0)
                out.slope["corr"] += _flat_sum(D3, W3D3)
            else:
                contrib = np.zeros((group.size, packed.q))
            if per_cluster:
                out.contributions["corr"].append(contrib)
        if derivatives:
            dS, dZb, dZl = residual_derivatives(st)
            out.cross["B"] += _flat_sum(W2D2, dS)
            if group.m > 1:
                out.cross["D"] += _flat_sum(W3D3, dZb)
                out.cross["E"] += _flat_sum(W3D3, dZl)

    for part in parts:
        if not np.isfinite(out.U[part]).all():
            raise DivergenceError(f"non-finite {part} estimating function")
    if per_cluster:
        out.contributions = {k: np.concatenate(v, axis=0) for k, v in out.contributions.items()}
    return out


def estimating_functions(dataset: ClusterDataset, theta: ThetaVector, model: ModelSpec):
    """``(U1, U2, U3)`` summed over all clusters."""
    ev = evaluate(dataset.packed, theta, model)
    return ev.U["mean"], ev.U["scale"], ev.U["corr"]
