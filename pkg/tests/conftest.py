import numpy as np
import pytest

from cmimpute.dataset import Strategy, TrialDataset, VisitGrid


def make_dataset(n=60, J=4, seed=0, miss=0.2, ice_frac=0.0, strategy=Strategy.MAR, effect=1.0,
                 labels=("control", "intervention")):
    """Small MVN trial with baseline covariate, monotone dropout and optional ICEs."""
    rng = np.random.default_rng(seed)
    arm = np.arange(n) % 2
    base = rng.normal(50, 5, n)
    A = rng.normal(size=(J, J))
    sigma = A @ A.T + J * np.eye(J)
    mu = np.linspace(1, J, J)
    y = base[:, None] * 0.5 + mu[None, :] + effect * arm[:, None] * np.arange(1, J + 1) / J
    y = y + rng.multivariate_normal(np.zeros(J), sigma, n)
    t_tilde = np.full(n, np.inf)
    strat = [None] * n
    for i in range(n):
        if rng.random() < ice_frac:
            t_tilde[i] = rng.integers(1, J)
            strat[i] = strategy
    drop = rng.random(n) < miss
    for i in np.flatnonzero(drop):
        start = int(t_tilde[i]) if np.isfinite(t_tilde[i]) else int(rng.integers(1, J))
        y[i, start:] = np.nan
    return TrialDataset(
        grid=VisitGrid(tuple(f"v{j}" for j in range(1, J + 1)), "v0"),
        subject_ids=[f"id{i:03d}" for i in range(n)],
        arm=arm,
        outcomes=y,
        covariates={"baseline": base},
        t_tilde=t_tilde,
        ice_strategy=strat,
        group_labels=labels,
    )


@pytest.fixture
def small_trial():
    return make_dataset()


def random_pd(rng, J):
    A = rng.normal(size=(J, J))
    return A @ A.T + 0.5 * np.eye(J)
