"""Trial simulator and operating-characteristic study harness.

Outcomes follow a random intercept and slope model around a linear placebo
trajectory. After each post-baseline visit a subject may discontinue study
drug with a logistic probability that grows with the outcome just observed;
an active-arm subject who discontinues follows the placebo slope from then
on (the truth is CIR-like), and drops out of the study with a fixed
probability, losing all later assessments.

Every subject draws from its own substream keyed by (seed, simulation,
subject), so datasets do not depend on scheduling or worker count.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.special
from scipy import stats

from .analysis import AncovaSpec
from .dataset import Strategy, TrialDataset, VisitGrid
from .inference import (
    BootstrapError,
    Pipeline,
    PipelineError,
    bootstrap_strategies,
    estimate_strategies,
    jackknife_strategies,
)
from .mmrm import MeanModelSpec
from .rng import substream

__all__ = [
    "ConfigError",
    "SimConfig",
    "SimPopulation",
    "RunRecord",
    "SummaryRow",
    "SummaryTable",
    "generate_trial",
    "simulate_subjects",
    "disc_probability",
    "PopulationSummary",
    "population_summary",
    "default_pipeline",
    "run_study",
    "summarize",
]

class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


@dataclass(frozen=True)
class SimConfig:
    n_per_group: int = 100
    visit_months: tuple[float, ...] = (0, 2, 4, 6, 8, 10, 12)
    placebo_start: float = 50.0
    placebo_end: float = 60.0
    active_change_month: float = 4.0
    active_slope_multiplier: float = 0.5
    re_sd_intercept: float = 5.0
    re_sd_slope: float = 5.0
    re_corr: float = 0.25
    resid_sd: float = 2.5
    disc_base_prob_placebo: float = 0.015
    disc_base_prob_active: float = 0.025
    disc_threshold: float = 50.0
    disc_odds_ratio: float = 1.5
    disc_outcome_step: float = 10.0
    disc_after_baseline: bool = False
    dropout_prob_at_disc: float = 0.75
    dropout_includes_disc_visit: bool = False

    def __post_init__(self):
        object.__setattr__(self, "visit_months", tuple(float(m) for m in self.visit_months))
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []
        for name in ("disc_base_prob_placebo", "disc_base_prob_active", "dropout_prob_at_disc"):
            if not 0 <= getattr(self, name) <= 1:
                out.append(f"{name} must lie in [0, 1]")
        for name in ("re_sd_intercept", "re_sd_slope", "resid_sd", "disc_outcome_step"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be positive")
        if not abs(self.re_corr) < 1:
            out.append("re_corr must lie in (-1, 1)")
        if self.n_per_group < 1:
            out.append("n_per_group must be positive")
        if len(self.visit_months) < 2 or list(self.visit_months) != sorted(set(self.visit_months)):
            out.append("visit_months must be increasing with a baseline and at least one follow-up")
        if self.disc_odds_ratio <= 0:
            out.append("disc_odds_ratio must be positive")
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        """Build from a mapping, reporting unknown keys and invalid values together."""
        known = {f.name for f in fields(cls)}
        problems = [f"unknown key: {k}" for k in sorted(set(data) - known)]
        kwargs = {k: v for k, v in data.items() if k in known}
        try:
            cfg = cls(**kwargs)
        except ConfigError as exc:
            raise ConfigError(problems + exc.problems) from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(problems + [str(exc)]) from None
        if problems:
            raise ConfigError(problems)
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["visit_months"] = list(self.visit_months)
        return d

    @property
    def J(self) -> int:
        return len(self.visit_months) - 1

    @property
    def years(self) -> np.ndarray:
        return np.asarray(self.visit_months) / 12.0

    def placebo_mean(self) -> np.ndarray:
        t = np.asarray(self.visit_months)
        span = t[-1] - t[0]
        return self.placebo_start + (self.placebo_end - self.placebo_start) * (t - t[0]) / span

    def active_mean(self, hypothesis: str) -> np.ndarray:
        pl = self.placebo_mean()
        if hypothesis == "null":
            return pl
        if hypothesis != "alternative":
            raise ValueError("hypothesis must be 'null' or 'alternative'")
        t = np.asarray(self.visit_months)
        slope = (self.placebo_end - self.placebo_start) / (t[-1] - t[0])
        after = np.maximum(t - self.active_change_month, 0.0)
        return pl - (1 - self.active_slope_multiplier) * slope * after

    def re_cov(self) -> np.ndarray:
        a, b = self.re_sd_intercept, self.re_sd_slope
        c = self.re_corr * a * b
        return np.array([[a * a, c], [c, b * b]])

    def marginal_sd(self) -> np.ndarray:
        Z = np.column_stack([np.ones(self.J + 1), self.years])
        return np.sqrt(np.einsum("ia,ab,ib->i", Z, self.re_cov(), Z) + self.resid_sd**2)


@dataclass(frozen=True, eq=False)
class SimPopulation:
    """Complete simulated trajectories before dropout (visit 0 = baseline)."""

    arm: np.ndarray
    outcomes: np.ndarray
    disc_visit: np.ndarray
    dropout: np.ndarray


def _subject_draws(seed: int, sim: int, n: int, n_assess: int) -> np.ndarray:
    # per subject: 2 random effects, a residual per assessment, then a
    # discontinuation uniform per assessment and one dropout uniform
    width = 2 + 2 * n_assess + 1
    out = np.empty((n, width))
    for i in range(n):
        g = substream(seed, sim, i)
        out[i, : 2 + n_assess] = g.standard_normal(2 + n_assess)
        out[i, 2 + n_assess:] = g.random(n_assess + 1)
    return out


def disc_probability(c: SimConfig, arm: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-visit probability of discontinuing after observing outcome ``y``.

    The log-odds rise by log(disc_odds_ratio) per disc_outcome_step above
    disc_threshold; at or below the threshold the base probability applies.
    """
    base = np.where(np.asarray(arm) == 1, c.disc_base_prob_active, c.disc_base_prob_placebo)
    excess = np.maximum(0.0, (np.asarray(y, float) - c.disc_threshold) / c.disc_outcome_step)
    with np.errstate(divide="ignore"):
        logit = np.log(base) - np.log1p(-base) + math.log(c.disc_odds_ratio) * excess
    return scipy.special.expit(logit)


def simulate_subjects(c: SimConfig, hypothesis: str, arm: np.ndarray, seed: int, sim: int = 0) -> SimPopulation:
    """Simulate complete trajectories and discontinuation/dropout events."""
    arm = np.asarray(arm, dtype=np.int8)
    n, K = arm.size, c.J + 1
    u = _subject_draws(seed, sim, n, K)
    L = np.linalg.cholesky(c.re_cov())
    re = u[:, :2] @ L.T
    resid = c.resid_sd * u[:, 2:2 + K]
    u_disc = u[:, 2 + K:2 + 2 * K]
    u_drop = u[:, -1]

    t = c.years
    pl = c.placebo_mean()
    act = c.active_mean(hypothesis)
    own = np.where(arm[:, None] == 1, act[None, :], pl[None, :])

    y = np.empty((n, K))
    disc = np.full(n, -1)
    first = 0 if c.disc_after_baseline else 1
    for k in range(K):
        d_idx = np.maximum(disc, 0)
        # after discontinuation the active arm follows the placebo slope
        anchored = own[np.arange(n), d_idx] + (pl[k] - pl[d_idx])
        mean = np.where(disc >= 0, anchored, own[:, k])
        y[:, k] = mean + re[:, 0] + re[:, 1] * t[k] + resid[:, k]
        if first <= k < K - 1:
            p = disc_probability(c, arm, y[:, k])
            new = (disc < 0) & (u_disc[:, k] < p)
            disc[new] = k
    dropout = (disc >= 0) & (u_drop < c.dropout_prob_at_disc)
    return SimPopulation(arm, y, disc, dropout)


def generate_trial(c: SimConfig, hypothesis: str, seed: int, sim: int = 0) -> TrialDataset:
    """One simulated trial with dropout applied and ICE records attached."""
    arm = np.repeat([0, 1], c.n_per_group)
    pop = simulate_subjects(c, hypothesis, arm, seed, sim)
    J = c.J
    y = pop.outcomes[:, 1:].copy()
    visit = np.arange(1, J + 1)
    cut = pop.disc_visit[:, None] - (1 if c.dropout_includes_disc_visit else 0)
    y[pop.dropout[:, None] & (visit[None, :] > cut)] = np.nan
    has_ice = pop.disc_visit >= 0
    labels = tuple(f"m{m:g}" for m in c.visit_months)
    return TrialDataset(
        grid=VisitGrid(labels[1:], labels[0]),
        subject_ids=[f"s{i:04d}" for i in range(arm.size)],
        arm=arm,
        outcomes=y,
        covariates={"baseline": pop.outcomes[:, 0]},
        t_tilde=np.where(has_ice, pop.disc_visit, np.inf),
        ice_strategy=[Strategy.MAR if h else None for h in has_ice],
        group_labels=("placebo", "active"),
    )


@dataclass(frozen=True)
class PopulationSummary:
    """Large-sample properties of the generator.

    ``truth`` is the treatment-policy effect at the final visit (active minus
    placebo mean outcome, discontinuers included) and ``truth_se`` its Monte
    Carlo standard error.
    """

    n_per_group: int
    sd_placebo: tuple[float, ...]
    disc_rate_placebo: float
    disc_rate_active: float
    dropout_rate_placebo: float
    dropout_rate_active: float
    truth: float
    truth_se: float


def population_summary(c: SimConfig, hypothesis: str, n_per_group: int, seed: int,
                       chunk: int = 50_000) -> PopulationSummary:
    """Simulate ``n_per_group`` subjects per arm in chunks and summarise.

    Chunk ``k`` uses simulation index ``k``, so results do not depend on memory
    limits other than through ``chunk``.
    """
    stats_ = {a: [] for a in (0, 1)}
    for k, start in enumerate(range(0, n_per_group, chunk)):
        m = min(chunk, n_per_group - start)
        arm = np.repeat([0, 1], m)
        pop = simulate_subjects(c, hypothesis, arm, seed, sim=k)
        for a in (0, 1):
            sel = pop.arm == a
            stats_[a].append((pop.outcomes[sel], pop.disc_visit[sel] >= 0, pop.dropout[sel]))
    y = {a: np.concatenate([s[0] for s in stats_[a]]) for a in (0, 1)}
    disc = {a: np.concatenate([s[1] for s in stats_[a]]) for a in (0, 1)}
    drop = {a: np.concatenate([s[2] for s in stats_[a]]) for a in (0, 1)}
    last = {a: y[a][:, -1] for a in (0, 1)}
    truth = float(last[1].mean() - last[0].mean())
    se = float(np.sqrt(last[1].var(ddof=1) / last[1].size + last[0].var(ddof=1) / last[0].size))
    return PopulationSummary(
        n_per_group=n_per_group,
        sd_placebo=tuple(float(v) for v in y[0].std(axis=0, ddof=1)),
        disc_rate_placebo=float(disc[0].mean()),
        disc_rate_active=float(disc[1].mean()),
        dropout_rate_placebo=float(drop[0].mean()),
        dropout_rate_active=float(drop[1].mean()),
        truth=truth,
        truth_se=se,
    )


def default_pipeline() -> Pipeline:
    """Imputation model and ANCOVA used for the simulation study.

    Post-ICE outcomes are excluded from the imputation model for every
    strategy, MAR included, and enter the analysis as observed.
    """
    return Pipeline(
        mean_spec=MeanModelSpec(covariates=("baseline",), covariate_by_visit=("baseline",)),
        ancova=AncovaSpec(dependent="change", covariates=("baseline",), baseline="baseline"),
        mask_mar_ice=True,
    )


# -- study -------------------------------------------------------------------


@dataclass(frozen=True)
class RunRecord:
    sim: int
    strategy: str
    method: str
    theta: float = math.nan
    se: float = math.nan
    reject: bool | None = None
    failed: bool = False


@dataclass(frozen=True)
class SummaryRow:
    strategy: str
    method: str
    n_sims: int
    n_fit_failures: int
    mean_theta: float
    sd_theta: float
    mean_se: float
    rejection_rate: float


_FIELDS = [f.name for f in fields(SummaryRow)]


@dataclass(frozen=True)
class SummaryTable:
    rows: tuple[SummaryRow, ...]
    alpha: float = 0.05

    def row(self, strategy: str, method: str) -> SummaryRow:
        for r in self.rows:
            if r.strategy == strategy and r.method == method:
                return r
        raise KeyError((strategy, method))

    def to_csv(self, manifest: str | None = None) -> str:
        buf = io.StringIO()
        if manifest:
            buf.write(f"# manifest: {manifest}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_FIELDS)
        for r in self.rows:
            w.writerow([getattr(r, f) if isinstance(getattr(r, f), (str, int)) else repr(float(getattr(r, f)))
                        for f in _FIELDS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, alpha: float = 0.05) -> "SummaryTable":
        lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
        rows = []
        for rec in csv.DictReader(lines):
            rows.append(SummaryRow(
                strategy=rec["strategy"],
                method=rec["method"],
                n_sims=int(rec["n_sims"]),
                n_fit_failures=int(rec["n_fit_failures"]),
                mean_theta=float(rec["mean_theta"]),
                sd_theta=float(rec["sd_theta"]),
                mean_se=float(rec["mean_se"]),
                rejection_rate=float(rec["rejection_rate"]),
            ))
        return cls(tuple(rows), alpha)

    def to_json(self) -> dict:
        return {"alpha": self.alpha, "rows": [asdict(r) for r in self.rows]}

    def to_text(self) -> str:
        head = f"{'Strategy':<9}{'Method':<11}{'Sims':>6}{'Fail':>6}{'Mean theta':>12}{'SD theta':>10}{'Mean se':>10}{'Reject':>9}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            rate = "" if math.isnan(r.rejection_rate) else f"{100 * r.rejection_rate:.1f}%"
            lines.append(
                f"{r.strategy:<9}{r.method:<11}{r.n_sims:>6}{r.n_fit_failures:>6}"
                f"{r.mean_theta:>12.3f}{r.sd_theta:>10.3f}{r.mean_se:>10.3f}{rate:>9}"
            )
        return "\n".join(lines) + "\n"


def summarize(records: Sequence[RunRecord], alpha: float = 0.05) -> SummaryTable:
    """Aggregate per (strategy, method); failed runs are counted and excluded."""
    if not records:
        raise ValueError("no records to summarise")
    keys: list[tuple[str, str]] = []
    for r in records:
        if (r.strategy, r.method) not in keys:
            keys.append((r.strategy, r.method))
    rows = []
    for strategy, method in keys:
        group = sorted((r for r in records if (r.strategy, r.method) == (strategy, method)), key=lambda r: r.sim)
        ok = [r for r in group if not r.failed]
        theta = np.array([r.theta for r in ok])
        se = np.array([r.se for r in ok])
        rejects = [r.reject for r in ok if r.reject is not None]
        rows.append(SummaryRow(
            strategy=strategy,
            method=method,
            n_sims=len(group),
            n_fit_failures=len(group) - len(ok),
            mean_theta=float(theta.mean()) if theta.size else math.nan,
            sd_theta=float(theta.std(ddof=1)) if theta.size > 1 else math.nan,
            mean_se=float(se.mean()) if se.size and np.isfinite(se).all() else math.nan,
            rejection_rate=float(np.mean(rejects)) if rejects else math.nan,
        ))
    return SummaryTable(tuple(rows), alpha)


def _one_simulation(args) -> list[RunRecord]:
    c, hypothesis, strategies, methods, sim, seed, B, alpha, pipeline = args
    d = generate_trial(c, hypothesis, seed, sim)
    names = [s.value for s in strategies]
    z = stats.norm.ppf(1 - alpha / 2)
    out: list[RunRecord] = []
    try:
        estimates = estimate_strategies(d, pipeline, strategies)
    except PipelineError:
        return [RunRecord(sim, nm, m, failed=True) for nm in names for m in (methods or ("none",))]
    if not methods:
        return [RunRecord(sim, s.value, "none", theta=estimates[s].theta) for s in strategies]
    for method in methods:
        try:
            if method == "jackknife":
                res = jackknife_strategies(d, pipeline, strategies)
                ses = {s: res[s].se_jack for s in strategies}
            elif method == "bootstrap":
                res = bootstrap_strategies(d, pipeline, strategies, B, seed=_boot_seed(seed, sim))
                ses = {s: res[s].se_boot for s in strategies}
            else:
                raise ValueError(f"unknown method {method!r}")
        except (PipelineError, BootstrapError):
            out += [RunRecord(sim, nm, method, failed=True) for nm in names]
            continue
        for s in strategies:
            theta, se = estimates[s].theta, ses[s]
            out.append(RunRecord(sim, s.value, method, theta, se, bool(abs(theta) > z * se)))
    return out


def _boot_seed(seed: int, sim: int) -> int:
    return int(np.random.SeedSequence([seed, sim, 0xB007]).generate_state(1)[0])


def run_study(
    c: SimConfig,
    hypothesis: str,
    strategies: Sequence[Strategy] = (Strategy.MAR, Strategy.J2R, Strategy.CR, Strategy.CIR),
    methods: Sequence[str] = ("jackknife",),
    n_sims: int = 100,
    seed: int = 0,
    jobs: int = 1,
    B: int = 1000,
    alpha: float = 0.05,
    pipeline: Pipeline | None = None,
    progress=None,
) -> SummaryTable:
    """Simulate ``n_sims`` trials and summarise estimates and tests.

    ``methods`` may be empty, in which case only point estimates are
    summarised (method ``"none"``).
    """
    if n_sims < 1:
        raise ValueError("n_sims must be at least 1")
    pipeline = pipeline or default_pipeline()
    tasks = [(c, hypothesis, list(strategies), tuple(methods), sim, seed, B, alpha, pipeline) for sim in range(n_sims)]
    records: list[RunRecord] = []
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            for k, recs in enumerate(pool.map(_one_simulation, tasks, chunksize=max(1, n_sims // (8 * jobs)))):
                records += recs
                if progress:
                    progress(k + 1, n_sims)
    else:
        for k, task in enumerate(tasks):
            records += _one_simulation(task)
            if progress:
                progress(k + 1, n_sims)
    return summarize(records, alpha)
