"""Slope matrix, meat matrix and the two sandwich covariance estimators.

The slope matrix of the stacked equations is block lower-triangular::

    [[ A,  0, 0],
     [-B,  C, 0],
     [-D, -E, F]]

``v_yf`` inverts it as is.  ``v_lp`` drops ``B``, ``D`` and ``E`` and inverts
only the diagonal blocks, which is what a bread that treats the three
equations as unrelated does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .equations import evaluate, group_state, residual_derivatives
from .exceptions import IdentifiabilityError
from .model import ClusterDataset, ModelSpec, ThetaVector, pair_indices


@dataclass(frozen=True)
class SlopeMatrix:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray
    F: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.A.shape[0], self.C.shape[0], self.F.shape[0]

    @property
    def assembled(self) -> np.ndarray:
        p, r, q = self.dims
        out = np.zeros((p + r + q, p + r + q))
        out[:p, :p] = self.A
        out[p : p + r, :p] = -self.B
        out[p : p + r, p : p + r] = self.C
        out[p + r :, :p] = -self.D
        out[p + r :, p : p + r] = -self.E
        out[p + r :, p + r :] = self.F
        return out

    def block_diagonal(self) -> SlopeMatrix:
        return SlopeMatrix(
            self.A,
            np.zeros_like(self.B),
            self.C,
            np.zeros_like(self.D),
            np.zeros_like(self.E),
            self.F,
        )

    def diagonal_block(self, component: str) -> np.ndarray:
        return {"mean": self.A, "scale": self.C, "corr": self.F}[component]

    def inverse(self) -> np.ndarray:
        """Inverse by block forward substitution."""
        Ai = _invert(self.A, "mean")
        Ci = _invert(self.C, "scale")
        Fi = _invert(self.F, "corr")
        p, r, q = self.dims
        out = np.zeros((p + r + q, p + r + q))
        out[:p, :p] = Ai
        out[p : p + r, p : p + r] = Ci
        out[p + r :, p + r :] = Fi
        CBA = Ci @ self.B @ Ai
        out[p : p + r, :p] = CBA
        out[p + r :, :p] = Fi @ (self.D @ Ai + self.E @ CBA)
        out[p + r :, p : p + r] = Fi @ self.E @ Ci
        return out


def _invert(block: np.ndarray, component: str) -> np.ndarray:
    if block.size == 0:
        return block.copy()
    try:
        inv = np.linalg.inv(block)
    except np.linalg.LinAlgError:
        raise IdentifiabilityError(f"non-identifiable component: {component}") from None
    if not np.isfinite(inv).all() or np.linalg.cond(block) > 1e15:
        raise IdentifiabilityError(f"non-identifiable component: {component}")
    return inv


@dataclass(frozen=True)
class SandwichResult:
    sigma1: SlopeMatrix
    sigma2: np.ndarray
    v_yf: np.ndarray
    v_lp: np.ndarray

    @property
    def se_yf(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.v_yf), 0.0, None))

    @property
    def se_lp(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.v_lp), 0.0, None))

    def block(self, component: str, flavor: str = "yf") -> np.ndarray:
        p, r, q = self.sigma1.dims
        sl = {"mean": slice(0, p), "scale": slice(p, p + r), "corr": slice(p + r, p + r + q)}[
            component
        ]
        cov = self.v_yf if flavor == "yf" else self.v_lp
        return cov[sl, sl]


def _packed(data):
    return data.packed if isinstance(data, ClusterDataset) else data


def _full_evaluation(data, theta, model):
    return evaluate(_packed(data), theta, model, derivatives=True, per_cluster=True)


def _slope_from(ev) -> SlopeMatrix:
    return SlopeMatrix(
        ev.slope["mean"], ev.cross["B"], ev.slope["scale"],
        ev.cross["D"], ev.cross["E"], ev.slope["corr"],
    )


def _meat_from(ev) -> np.ndarray:
    G = np.concatenate([ev.contributions[c] for c in ("mean", "scale", "corr")], axis=1)
    meat = G.T @ G
    return 0.5 * (meat + meat.T)


def slope_matrix(data, theta: ThetaVector, model: ModelSpec) -> SlopeMatrix:
    return _slope_from(_full_evaluation(data, theta, model))


def meat_matrix(data, theta: ThetaVector, model: ModelSpec) -> np.ndarray:
    """Sum over clusters of the outer product of the stacked contributions."""
    return _meat_from(_full_evaluation(data, theta, model))


def sandwich_from(sigma1: SlopeMatrix, sigma2: np.ndarray) -> SandwichResult:
    bread = sigma1.inverse()
    bread_lp = sigma1.block_diagonal().inverse()
    v_yf = bread @ sigma2 @ bread.T
    v_lp = bread_lp @ sigma2 @ bread_lp.T
    return SandwichResult(sigma1, sigma2, 0.5 * (v_yf + v_yf.T), 0.5 * (v_lp + v_lp.T))


def sandwich(data, theta: ThetaVector, model: ModelSpec) -> SandwichResult:
    """Both sandwich estimators from one slope matrix and one meat matrix."""
    ev = _full_evaluation(data, theta, model)
    return sandwich_from(_slope_from(ev), _meat_from(ev))


# ---------------------------------------------------------------------------
# diagnostics for when the block-diagonal bread happens to be adequate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockDiagnostics:
    norm_b: float
    norm_d: float
    norm_e: float
    pair_e: np.ndarray
    expected_pair_e: np.ndarray
    rho_mean: float
    rho_counts: np.ndarray
    rho_edges: np.ndarray

    @property
    def scaled_e(self) -> float:
        """Magnitude of the pair-averaged ``dz/dlam`` along the first scale column."""
        return float(abs(self.pair_e[0]))


def block_diagnostics(data, theta: ThetaVector, model: ModelSpec, bins: int = 20) -> BlockDiagnostics:
    """Size of the off-diagonal slope blocks and the spread of the fitted correlations.

    ``norm_*`` are Frobenius norms of ``B/n``, ``D/n`` and ``E/n``.  ``pair_e``
    averages ``-dz/dlam`` over all pairs, which for a log-linked scale
    intercept is the mean of ``z``; ``expected_pair_e`` replaces ``z`` by the
    fitted ``rho``, its expectation under the model.
    """
    packed = _packed(data)
    sig = slope_matrix(packed, theta, model)
    n = packed.n
    total = np.zeros(packed.r)
    expected = np.zeros(packed.r)
    rhos = []
    pairs = 0
    for group in packed.groups:
        if group.m < 2:
            continue
        st = group_state(group, theta, model)
        _, _, dZl = residual_derivatives(st)
        total -= dZl.sum(axis=(0, 1))
        G = st.D2 / st.phi[..., None]
        jj, kk = pair_indices(group.m)
        expected += (0.5 * st.rho[..., None] * (G[:, jj] + G[:, kk])).sum(axis=(0, 1))
        rhos.append(st.rho.reshape(-1))
        pairs += st.rho.size
    rho = np.concatenate(rhos) if rhos else np.zeros(0)
    counts, edges = np.histogram(rho, bins=bins, range=(-1.0, 1.0))
    denom = max(pairs, 1)
    return BlockDiagnostics(
        norm_b=float(np.linalg.norm(sig.B) / n),
        norm_d=float(np.linalg.norm(sig.D) / n),
        norm_e=float(np.linalg.norm(sig.E) / n),
        pair_e=total / denom,
        expected_pair_e=expected / denom,
        rho_mean=float(rho.mean()) if rho.size else 0.0,
        rho_counts=counts,
        rho_edges=edges,
    )
