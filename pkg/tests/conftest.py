from __future__ import annotations

import numpy as np
import pytest

from geemvc.model import (
    Cluster,
    ClusterDataset,
    LinkSpec,
    ModelSpec,
    ThetaVector,
    WorkingStructure,
    get_variance_function,
    n_pairs,
)


def random_dataset(rng, n=5, sizes=(2, 3, 4), p=2, r=2, q=2, y_scale=1.0):
    """Small dataset with arbitrary covariates and responses, for derivative checks."""
    clusters = []
    for i in range(n):
        m = int(sizes[i % len(sizes)])
        X1 = np.column_stack([np.ones(m), rng.normal(size=(m, p - 1))])
        X2 = np.column_stack([np.ones(m), 0.5 * rng.normal(size=(m, r - 1))])
        X3 = np.column_stack([np.ones(n_pairs(m)), 0.5 * rng.normal(size=(n_pairs(m), q - 1))])
        y = y_scale * rng.normal(size=m)
        clusters.append(Cluster(i, y, X1, X2, X3))
    return ClusterDataset(tuple(clusters))


def random_theta(rng, p=2, r=2, q=2) -> ThetaVector:
    beta = rng.normal(scale=0.5, size=p)
    lam = rng.normal(scale=0.3, size=r)
    gamma = np.concatenate([[rng.uniform(0.05, 0.25)], rng.normal(scale=0.05, size=q - 1)])
    return ThetaVector(beta, lam, gamma)


def make_model(vf="tanh-shift", corr_link="identity", mean_link="identity", r2="identity",
               r3="identity", v3_mode="delta-scaled") -> ModelSpec:
    return ModelSpec(
        LinkSpec.from_names(mean_link, "log", corr_link),
        get_variance_function(vf),
        WorkingStructure(r2, r3, v3_mode),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(label: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
