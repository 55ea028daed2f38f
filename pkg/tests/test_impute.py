import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmimpute.dataset import IceRecord, Strategy, Subject, TrialDataset, VisitGrid, post_ice_mask
from cmimpute.impute import (
    DeltaAdjustment,
    ImputationError,
    ImputedDataset,
    MarginalDistribution,
    _apply_strategy,
    apply_delta,
    conditional_mean_impute,
    impute_dataset,
    marginal_distribution,
    marginal_means,
    mean_tilde,
    random_impute,
    random_impute_dataset,
)
from cmimpute.mmrm import CovarianceSpec, MeanModelSpec, MmrmFit, fit_reml
from cmimpute.rng import substream

from conftest import make_dataset, random_pd


def test_strategy_means_hand_example():
    mu, ref = np.array([1.0, 2, 3, 4]), np.zeros(4)
    assert np.array_equal(_apply_strategy(mu, ref, 2, Strategy.J2R), [1, 2, 0, 0])
    assert np.array_equal(_apply_strategy(mu, ref, 2, Strategy.CIR), [1, 2, 2, 2])
    assert np.array_equal(_apply_strategy(mu, ref, 2, Strategy.CR), [0, 0, 0, 0])
    assert np.array_equal(_apply_strategy(mu, ref, 2, Strategy.MAR), mu)
    assert np.array_equal(_apply_strategy(mu, ref, np.inf, Strategy.J2R), mu)


def test_marginal_distribution_control_and_no_ice():
    d = make_dataset(n=80, J=4, miss=0.2, ice_frac=0.3, strategy=Strategy.J2R)
    spec = MeanModelSpec(covariates=("baseline",))
    fit = fit_reml(d, spec)
    ctrl = next(i for i in range(d.n) if d.arm[i] == 0)
    plain = next(i for i in range(d.n) if d.arm[i] == 1 and not d.has_ice[i])
    for i in (ctrl, plain):
        s = d.subject(i)
        ref = marginal_distribution(s, fit, Strategy.MAR, spec, d.grid, d.group_labels)
        for strat in (Strategy.CR, Strategy.J2R, Strategy.CIR):
            if s.ice is None and i == plain:
                with pytest.raises(ImputationError, match="requires an ICE record"):
                    marginal_distribution(s, fit, strat, spec, d.grid, d.group_labels)
                continue
            m = marginal_distribution(s, fit, strat, spec, d.grid, d.group_labels)
            assert np.allclose(m.mu_tilde, ref.mu_tilde)
            assert np.array_equal(m.sigma_tilde, fit.sigma[0])
    # no ICE record and no strategy: MAR means everywhere
    s = d.subject(plain)
    m = marginal_distribution(s, fit, None, spec, d.grid, d.group_labels)
    Xmu = marginal_means(d, fit, spec)[plain]
    assert np.allclose(m.mu_tilde, Xmu)


def test_reference_based_by_group_rejected():
    d = make_dataset(n=80, J=3, ice_frac=0.3, strategy=Strategy.J2R)
    spec = MeanModelSpec()
    fit = fit_reml(d, spec, CovarianceSpec(grouping="by_group"))
    i = next(i for i in range(d.n) if d.arm[i] == 1 and d.has_ice[i])
    with pytest.raises(ImputationError, match="group-specific"):
        marginal_distribution(d.subject(i), fit, Strategy.J2R, spec, d.grid, d.group_labels)


def test_conditional_mean_examples():
    m = MarginalDistribution(np.zeros(2), np.array([[1.0, 0.5], [0.5, 1.0]]))
    assert np.array_equal(conditional_mean_impute(np.array([2.0, np.nan]), m), [2.0, 1.0])
    y = np.array([0.3, -1.2])
    assert np.array_equal(conditional_mean_impute(y, m), y)
    mu = np.array([3.0, 4.0])
    assert np.array_equal(conditional_mean_impute(np.full(2, np.nan), MarginalDistribution(mu, m.sigma_tilde)), mu)


def test_conditional_mean_against_regression_on_draws():
    rng = np.random.default_rng(0)
    S = np.array([[1.0, 0.5], [0.5, 1.0]])
    Z = rng.multivariate_normal(np.zeros(2), S, 1_000_000)
    slope, icpt = np.polyfit(Z[:, 0], Z[:, 1], 1)
    pred = icpt + 2 * slope
    resid_sd = np.std(Z[:, 1] - icpt - slope * Z[:, 0])
    se = resid_sd * np.sqrt(1 / Z.shape[0] + (2 - Z[:, 0].mean()) ** 2 / ((Z[:, 0] - Z[:, 0].mean()) ** 2).sum())
    got = conditional_mean_impute(np.array([2.0, np.nan]), MarginalDistribution(np.zeros(2), S))[1]
    assert abs(got - pred) < 3 * se


def test_conditional_mean_exact_for_degenerate_direction():
    # y2 = 2*y1 + 1 exactly: the joint covariance is singular along that line
    mu = np.array([1.0, 3.0, 0.0])
    v = np.array([1.0, 2.0, 0.0])
    S = np.outer(v, v) + np.diag([0.0, 0.0, 1.0]) + 1e-12 * np.eye(3)
    y = np.array([4.0, np.nan, 0.5])
    out = conditional_mean_impute(y, MarginalDistribution(mu, S))
    assert out[1] == pytest.approx(9.0, abs=1e-6)


def test_random_impute_moments():
    rng = np.random.default_rng(3)
    S = random_pd(rng, 4)
    mu = rng.normal(size=4)
    y = np.array([0.5, np.nan, -0.2, np.nan])
    m = MarginalDistribution(mu, S)
    assert np.array_equal(random_impute(np.ones(4), m, substream(1, 0)), np.ones(4))
    g = substream(5, 1)
    draws = np.array([random_impute(y, m, g)[[1, 3]] for _ in range(100_000)])
    cm = conditional_mean_impute(y, m)[[1, 3]]
    o, q = [0, 2], [1, 3]
    C = S[np.ix_(q, q)] - S[np.ix_(q, o)] @ np.linalg.solve(S[np.ix_(o, o)], S[np.ix_(o, q)])
    sd = np.sqrt(np.diag(C))
    assert np.all(np.abs(draws.mean(axis=0) - cm) < 3 * sd / np.sqrt(draws.shape[0]))
    emp = np.cov(draws.T)
    assert np.all(np.abs(np.diag(emp) / np.diag(C) - 1) < 0.05)
    assert np.array_equal(draws[:, 0] == y[0], np.zeros(len(draws), bool))


def test_random_impute_dataset_reproducible_and_averages_to_cmi():
    d = make_dataset(n=60, J=3, miss=0.4, seed=2)
    spec = MeanModelSpec(covariates=("baseline",))
    fit = fit_reml(d, spec)
    mt = marginal_means(d, fit, spec)
    a = random_impute_dataset(d, fit, mt, seed=9, draw=0)
    b = random_impute_dataset(d, fit, mt, seed=9, draw=0)
    assert np.array_equal(a.filled, b.filled)
    obs = ~np.isnan(d.outcomes)
    assert np.array_equal(a.filled[obs], d.outcomes[obs])
    cmi = impute_dataset(d, fit, mt).filled
    M = 4000
    avg = np.mean([random_impute_dataset(d, fit, mt, seed=9, draw=k).filled for k in range(M)], axis=0)
    miss = ~obs
    sd = np.sqrt(np.max(np.diag(fit.sigma[0])))
    assert np.all(np.abs(avg[miss] - cmi[miss]) < 4 * sd / np.sqrt(M))


def test_impute_dataset_matches_per_subject():
    d = make_dataset(n=50, J=4, miss=0.4, ice_frac=0.4, strategy=Strategy.CIR, seed=7)
    spec = MeanModelSpec(covariates=("baseline",))
    fit = fit_reml(d, spec)
    mt = marginal_means(d, fit, spec)
    imp = impute_dataset(d, fit, mt)
    for i in range(d.n):
        s = d.subject(i)
        m = marginal_distribution(s, fit, d.ice_strategy[i], spec, d.grid, d.group_labels)
        assert np.allclose(imp.filled[i], conditional_mean_impute(s, m), atol=1e-10)
    assert not np.isnan(imp.filled).any()
    obs = ~np.isnan(d.outcomes)
    assert np.array_equal(imp.filled[obs], d.outcomes[obs])
    assert set(np.unique(imp.provenance)) <= {"observed", "imputed"}


def test_apply_delta():
    d = make_dataset(n=20, J=3, miss=0.4, seed=1)
    filled = np.nan_to_num(d.outcomes, nan=0.0)
    imp = ImputedDataset(d, filled, np.isnan(d.outcomes))
    same = apply_delta(imp, DeltaAdjustment())
    assert np.array_equal(same.filled, imp.filled)
    i = int(np.flatnonzero(imp.imputed.any(axis=1))[0])
    sid = d.subject_ids[i]
    shifted = apply_delta(imp, DeltaAdjustment({sid: [1.0, 1.0, 1.0]}))
    diff = shifted.filled - imp.filled
    assert np.array_equal(diff[i], imp.imputed[i].astype(float))
    assert np.count_nonzero(diff) == imp.imputed[i].sum()
    assert np.array_equal(shifted.imputed, imp.imputed)
    j = int(np.flatnonzero(~imp.imputed.any(axis=1))[0])
    untouched = apply_delta(imp, DeltaAdjustment({d.subject_ids[j]: [5.0, 5.0, 5.0]}))
    assert np.array_equal(untouched.filled, imp.filled)
    with pytest.raises(ValueError):
        DeltaAdjustment({sid: [np.inf, 0, 0]})


def test_delta_post_ice_and_groups():
    d = make_dataset(n=20, J=3, ice_frac=0.5, miss=0.0, seed=4)
    imp = ImputedDataset(d, d.outcomes.copy(), np.zeros_like(d.outcomes, bool))
    out = apply_delta(imp, DeltaAdjustment(group_offsets={"intervention": [2.0, 2.0, 2.0]}, applies_to="post_ice"))
    expect = np.where(post_ice_mask(d) & (d.arm[:, None] == 1), 2.0, 0.0)
    assert np.allclose(out.filled - imp.filled, expect, atol=1e-12, rtol=0)


@st.composite
def mean_cases(draw):
    J = draw(st.integers(2, 7))
    t = draw(st.integers(0, J - 1))
    vals = st.floats(-50, 50, allow_nan=False)
    mu = np.array(draw(st.lists(vals, min_size=J, max_size=J)))
    ref = np.array(draw(st.lists(vals, min_size=J, max_size=J)))
    return mu, ref, t


@settings(max_examples=200, deadline=None)
@given(mean_cases())
def test_strategy_invariants(case):
    mu, ref, t = case
    j2r = _apply_strategy(mu, ref, t, Strategy.J2R)
    cir = _apply_strategy(mu, ref, t, Strategy.CIR)
    assert np.array_equal(j2r[t:], ref[t:])
    assert np.array_equal(j2r[:t], mu[:t]) and np.array_equal(cir[:t], mu[:t])
    if t > 0:
        assert np.allclose(np.diff(cir[t - 1:]), np.diff(ref[t - 1:]), atol=1e-9)
    else:
        assert np.array_equal(cir, ref)
    assert np.array_equal(_apply_strategy(mu, ref, t, Strategy.CR), ref)
    arm = np.array([0])
    for s in Strategy:
        assert np.array_equal(mean_tilde(mu[None], ref[None], arm, np.array([t]), [s])[0], mu)
