import math

import numpy as np
import pytest

from cmimpute.dataset import Strategy
from cmimpute.simgen import (
    ConfigError,
    RunRecord,
    SimConfig,
    SummaryTable,
    disc_probability,
    generate_trial,
    population_summary,
    run_study,
    simulate_subjects,
    summarize,
)

C = SimConfig()


def test_default_config_shape():
    assert C.J == 6
    assert np.allclose(C.placebo_mean(), np.linspace(50, 60, 7))
    assert C.active_mean("null") == pytest.approx(C.placebo_mean())
    alt = C.active_mean("alternative")
    # half the placebo slope from month 4 onwards
    assert alt[-1] == pytest.approx(60 - 0.5 * (10 / 12) * 8)
    assert np.array_equal(alt[:3], C.placebo_mean()[:3])
    with pytest.raises(ValueError):
        C.active_mean("maybe")


def test_marginal_sd_closed_form():
    sd = C.marginal_sd()
    assert sd[0] == pytest.approx(math.sqrt(25 + 2.5**2))
    assert sd[-1] == pytest.approx(math.sqrt(25 + 25 + 2 * 0.25 * 25 + 2.5**2))


def test_disc_probability_examples():
    arm = np.array([0, 1])
    assert disc_probability(C, arm, np.array([50.0, 50.0])) == pytest.approx([0.015, 0.025], rel=1e-14)
    assert disc_probability(C, arm, np.array([30.0, 10.0])) == pytest.approx([0.015, 0.025], rel=1e-14)
    odds = lambda p: p / (1 - p)  # noqa: E731
    p50 = disc_probability(C, arm, np.full(2, 50.0))
    p60 = disc_probability(C, arm, np.full(2, 60.0))
    assert odds(p60) / odds(p50) == pytest.approx([1.5, 1.5], rel=1e-12)
    one = SimConfig(disc_base_prob_placebo=1.0, disc_base_prob_active=0.0)
    assert np.array_equal(disc_probability(one, arm, np.array([70.0, 70.0])), [1.0, 0.0])


def test_same_seed_same_dataset():
    a = generate_trial(C, "null", seed=11, sim=3)
    b = generate_trial(C, "null", seed=11, sim=3)
    assert np.array_equal(a.outcomes, b.outcomes, equal_nan=True)
    assert np.array_equal(a.t_tilde, b.t_tilde)
    assert np.array_equal(a.covariates["baseline"], b.covariates["baseline"])
    c = generate_trial(C, "null", seed=11, sim=4)
    assert not np.array_equal(a.covariates["baseline"], c.covariates["baseline"])


def test_subject_draws_do_not_depend_on_sample_size():
    small = simulate_subjects(C, "null", np.array([0, 1]), seed=2)
    big = simulate_subjects(C, "null", np.array([0, 1, 0, 1]), seed=2)
    assert np.array_equal(small.outcomes, big.outcomes[:2])


def test_trial_structure():
    d = generate_trial(C, "alternative", seed=0)
    assert d.n == 200 and d.J == 6
    assert d.grid.labels == ("m2", "m4", "m6", "m8", "m10", "m12")
    assert d.group_labels == ("placebo", "active")
    ice = np.isfinite(d.t_tilde)
    assert all((s is Strategy.MAR) == bool(h) for s, h in zip(d.ice_strategy, ice))
    # dropout removes everything after the discontinuation visit and nothing else
    visit = np.arange(1, d.J + 1)
    miss = np.isnan(d.outcomes)
    assert not miss[~ice].any()
    for i in np.flatnonzero(miss.any(axis=1)):
        assert np.array_equal(miss[i], visit > d.t_tilde[i])


def test_no_discontinuation_means_complete_data():
    c = SimConfig(disc_base_prob_placebo=0.0, disc_base_prob_active=0.0)
    d = generate_trial(c, "null", seed=1)
    assert not np.isnan(d.outcomes).any() and not np.isfinite(d.t_tilde).any()


def test_disc_independent_of_outcome_keeps_placebo_means():
    # with an odds ratio of one, discontinuation carries no information about outcomes
    c = SimConfig(disc_odds_ratio=1.0, disc_base_prob_placebo=0.1)
    s = population_summary(c, "null", 40_000, seed=5)
    assert abs(s.truth) < 3 * s.truth_se
    assert s.disc_rate_placebo == pytest.approx(1 - 0.9**5, abs=0.01)


def test_population_rates_and_dropout():
    s = population_summary(C, "null", 20_000, seed=1, chunk=7_000)
    assert 0 < s.disc_rate_placebo < s.disc_rate_active < 1
    assert s.dropout_rate_active == pytest.approx(0.75 * s.disc_rate_active, abs=0.01)
    assert s.sd_placebo[0] == pytest.approx(C.marginal_sd()[0], rel=0.02)


def test_config_validation_collects_problems():
    with pytest.raises(ConfigError) as exc:
        SimConfig.from_dict({"n_per_group": 0, "re_corr": 1.5, "colour": "red"})
    msgs = exc.value.problems
    assert any("unknown key: colour" in m for m in msgs)
    assert any("re_corr" in m for m in msgs) and any("n_per_group" in m for m in msgs)
    assert SimConfig.from_dict(C.to_dict()) == C


def test_summarize_examples():
    recs = [RunRecord(k, "MAR", "jackknife", 1.0, 0.5, k % 2 == 0) for k in range(4)]
    recs.append(RunRecord(4, "MAR", "jackknife", failed=True))
    row = summarize(recs).row("MAR", "jackknife")
    assert row.n_sims == 5 and row.n_fit_failures == 1
    assert row.sd_theta == 0.0 and row.mean_theta == 1.0 and row.mean_se == 0.5
    assert row.rejection_rate == 0.5
    single = summarize([RunRecord(0, "CR", "none", 2.0)]).row("CR", "none")
    assert math.isnan(single.sd_theta) and math.isnan(single.rejection_rate)
    with pytest.raises(ValueError):
        summarize([])


def test_summary_csv_round_trip():
    recs = [RunRecord(k, s, "jackknife", 0.1 * k + len(s) / 3, 0.7 + k / 7, k == 1)
            for k in range(3) for s in ("MAR", "J2R")]
    t = summarize(recs)
    back = SummaryTable.from_csv(t.to_csv(manifest="manifest.json"))
    assert back.rows == t.rows


def test_study_single_simulation_and_null_effect():
    t = run_study(C, "null", methods=(), n_sims=1, seed=0)
    for s in ("MAR", "J2R", "CR", "CIR"):
        r = t.row(s, "none")
        assert r.n_sims == 1 and math.isnan(r.sd_theta) and math.isfinite(r.mean_theta)
    t = run_study(C, "null", methods=(), n_sims=40, seed=0)
    for r in t.rows:
        assert abs(r.mean_theta) < 4 * r.sd_theta / math.sqrt(40)


def test_study_with_jackknife_small():
    c = SimConfig(n_per_group=20)
    t = run_study(c, "alternative", strategies=(Strategy.MAR, Strategy.J2R), n_sims=2, seed=3)
    for r in t.rows:
        assert r.method == "jackknife" and r.n_sims == 2
        assert r.n_fit_failures == 0 and r.mean_se > 0
