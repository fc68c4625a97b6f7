"""Successive scoring updates for beta, lam and gamma."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .equations import evaluate
from .exceptions import DivergenceError, IdentifiabilityError
from .model import (
    COMPONENTS,
    IDENTITY,
    ClusterDataset,
    ModelSpec,
    PackedData,
    ThetaVector,
)

log = logging.getLogger(__name__)

MAX_HALVINGS = 5


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 100
    tol: float = 1e-8
    theta0: ThetaVector | None = None
    free: tuple[str, ...] = COMPONENTS

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        bad = set(self.free) - set(COMPONENTS)
        if bad:
            raise ValueError(f"unknown components {sorted(bad)}")

    @property
    def init_mode(self) -> str:
        return "auto" if self.theta0 is None else "user"


@dataclass(frozen=True)
class FitResult:
    theta: ThetaVector
    converged: bool
    iterations: int
    update_trace: tuple[float, ...]
    clamp_count: int
    pd_repair_count: int
    u_norms: tuple[float, float, float]
    n: int
    model: ModelSpec = field(repr=False)
    clamped_at_solution: bool = False

    @property
    def theta_hat(self) -> ThetaVector:
        return self.theta


def _solve(mat: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    try:
        step = np.linalg.solve(mat, rhs)
    except np.linalg.LinAlgError:
        raise IdentifiabilityError(f"non-identifiable component: singular {what} slope") from None
    return step


def _packed(data) -> PackedData:
    return data.packed if isinstance(data, ClusterDataset) else data


def _intercept_column(X: np.ndarray) -> int | None:
    flat = X.reshape(-1, X.shape[-1])
    for col in range(flat.shape[1]):
        if np.all(flat[:, col] == 1.0):
            return col
    return None


def initialize(data, model: ModelSpec, max_iter: int = 50) -> ThetaVector:
    """Starting values from working independence and a constant scale.

    ``beta`` solves the mean equation with ``R1 = I`` and ``phi = 1``; ``lam``
    has its intercept set so the fitted scale equals the mean of ``s``; ``gamma``
    is zero.
    """
    packed = _packed(data)
    links = model.links
    p, r, q = packed.p, packed.r, packed.q
    X1 = np.concatenate([g.X1.reshape(-1, p) for g in packed.groups])
    y = np.concatenate([g.y.reshape(-1) for g in packed.groups])
    if np.linalg.matrix_rank(X1) < p:
        raise IdentifiabilityError("rank-deficient mean design")

    beta = np.zeros(p)
    icol = _intercept_column(X1)
    if links.mean is not IDENTITY and icol is not None:
        beta[icol] = links.mean.forward(max(y.mean(), 1e-8))
    vf = model.variance
    for _ in range(max_iter):
        eta = X1 @ beta
        mu = links.mean.inverse(eta)
        D = links.mean.dinverse(eta)[:, None] * X1
        w = 1.0 / vf.v(mu)
        step = _solve(D.T @ (w[:, None] * D), D.T @ (w * (y - mu)), "mean")
        beta = beta + step
        if np.max(np.abs(step)) < 1e-12 * (1 + np.max(np.abs(beta))):
            break

    mu = links.mean.inverse(X1 @ beta)
    s = (y - mu) ** 2 / vf.v(mu)
    X2 = np.concatenate([g.X2.reshape(-1, r) for g in packed.groups])
    lam = np.zeros(r)
    icol = _intercept_column(X2)
    if icol is not None:
        lam[icol] = links.scale.forward(max(s.mean(), 1e-8))
    elif links.scale is IDENTITY:
        lam = np.linalg.lstsq(X2, s, rcond=None)[0]
    return ThetaVector(beta, lam, np.zeros(q))


def _usable(packed: PackedData, theta: ThetaVector, model: ModelSpec, comp: str) -> bool:
    """Whether the moments that ``comp`` controls are finite and in range at ``theta``."""
    links, coef = model.links, theta.component(comp)
    with np.errstate(all="ignore"):
        for g in packed.groups:
            if comp == "mean":
                mu = links.mean.inverse(g.X1 @ coef)
                if not (np.isfinite(mu).all() and (model.variance.v(mu) > 0).all()):
                    return False
            elif comp == "scale":
                phi = links.scale.inverse(g.X2 @ coef)
                if not (np.isfinite(phi).all() and (phi > 0).all()):
                    return False
            elif not np.isfinite(g.X3 @ coef).all():
                return False
    return True


def fit(data, model: ModelSpec, opts: FitOptions | None = None) -> FitResult:
    """Solve the three estimating equations by successive scoring sweeps.

    Each sweep updates ``beta``, then ``lam``, then ``gamma``; every update uses
    the most recent values of the others.  Components not listed in
    ``opts.free`` stay at their starting values.
    """
    opts = opts or FitOptions()
    packed = _packed(data)
    theta = opts.theta0 if opts.theta0 is not None else initialize(packed, model)
    if theta.dims != (packed.p, packed.r, packed.q):
        raise ValueError(f"theta dims {theta.dims} do not match data {(packed.p, packed.r, packed.q)}")
    free = [c for c in COMPONENTS if c in opts.free]

    trace: list[float] = []
    clamps = repairs = 0
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        biggest = 0.0
        for comp in free:
            ev = evaluate(packed, theta, model, parts=(comp,))
            clamps += ev.clamped
            repairs += ev.repairs
            step = _solve(ev.slope[comp], ev.U[comp], comp)
            if not np.isfinite(step).all():
                raise DivergenceError(f"diverged at iteration {it}")
            current = theta.component(comp)
            for _ in range(MAX_HALVINGS + 1):
                trial = theta.replace(comp, current + step)
                if _usable(packed, trial, model, comp):
                    break
                step = 0.5 * step
            else:
                raise DivergenceError(f"diverged at iteration {it}")
            theta = trial
            biggest = max(biggest, float(np.max(np.abs(step), initial=0.0)))
        trace.append(biggest)
        if biggest <= opts.tol:
            converged = True
            break

    final = evaluate(packed, theta, model)
    u_norms = tuple(float(np.max(np.abs(final.U[c]), initial=0.0)) for c in COMPONENTS)
    if not converged:
        log.info("no convergence after %d sweeps (last update %.3g)", it, trace[-1])
    return FitResult(
        theta=theta,
        converged=converged,
        iterations=it,
        update_trace=tuple(trace),
        clamp_count=clamps,
        pd_repair_count=repairs,
        u_norms=u_norms,
        n=packed.n,
        model=model,
        clamped_at_solution=final.clamped > 0,
    )
