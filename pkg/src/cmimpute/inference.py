"""Pipeline runner and resampling inference.

The pipeline is mask -> REML fit -> conditional-mean imputation -> ANCOVA.
It is deterministic, so the jackknife built on it gives reproducible
standard errors and p-values; the bootstrap draws its resamples from
counter-based substreams keyed by (seed, replicate, attempt).

Several imputation strategies can be evaluated on the same data at once:
strategies whose masked data coincide share one REML fit.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .analysis import AnalysisError, AncovaSpec, EffectEstimate, _Ancova
from .dataset import Strategy, TrialDataset, post_ice_mask
from .impute import (
    DeltaAdjustment,
    ImputationError,
    ImputedDataset,
    _Conditioner,
    fill_conditional_mean,
    mean_tilde,
)
from .mmrm import (
    CovarianceSpec,
    FitError,
    FitOptions,
    MeanModelSpec,
    MmrmFit,
    _fit_arrays,
    design_matrices,
)
from .rng import substream

__all__ = [
    "PipelineError",
    "JackknifeError",
    "BootstrapError",
    "Pipeline",
    "JackknifeResult",
    "BootstrapResult",
    "InferenceResult",
    "run_pipeline",
    "impute",
    "estimate_strategies",
    "jackknife",
    "jackknife_strategies",
    "bootstrap",
    "bootstrap_strategies",
    "normal_inference",
    "percentile_ci",
    "bootstrap_pvalue",
    "pB_accuracy",
]

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """A pipeline stage failed; ``stage`` is one of fit/impute/analysis."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class JackknifeError(PipelineError):
    def __init__(self, subject_id: str, cause: PipelineError):
        RuntimeError.__init__(self, f"leave-one-out fit without subject {subject_id} failed: {cause}")
        self.stage = cause.stage
        self.cause = cause.cause
        self.subject_id = subject_id


class BootstrapError(RuntimeError):
    pass


@dataclass(frozen=True)
class Pipeline:
    """Analysis settings.

    ``strategy`` overrides the strategy of every ICE record (``None`` uses
    the records as given). ``mask_mar_ice`` also removes post-ICE outcomes of
    MAR-strategy ICEs from the imputation model.
    """

    mean_spec: MeanModelSpec = MeanModelSpec()
    ancova: AncovaSpec = AncovaSpec()
    cov_spec: CovarianceSpec = CovarianceSpec()
    strategy: Strategy | None = None
    mask_mar_ice: bool = False
    delta: DeltaAdjustment | None = None
    fit_options: FitOptions = FitOptions()


@dataclass(frozen=True, eq=False)
class InferenceResult:
    estimate: float
    se: float
    ci_low: float
    ci_high: float
    p_two_sided: float
    method: str
    alpha: float = 0.05

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "estimate": self.estimate,
            "se": self.se,
            "ci": [self.ci_low, self.ci_high],
            "p": self.p_two_sided,
            "alpha": self.alpha,
        }


def normal_inference(estimate: float, se: float, alpha: float = 0.05, theta0: float = 0.0,
                     method: str = "normal") -> InferenceResult:
    """Wald-type CI and two-sided p-value from a resampling standard error."""
    z = stats.norm.ppf(1 - alpha / 2)
    if not np.isfinite(se):
        return InferenceResult(estimate, se, math.nan, math.nan, math.nan, method, alpha)
    if se == 0:
        p = 1.0 if estimate == theta0 else 0.0
    else:
        p = float(2 * stats.norm.sf(abs(estimate - theta0) / se))
    return InferenceResult(estimate, se, estimate - z * se, estimate + z * se, min(p, 1.0), method, alpha)


@dataclass(frozen=True, eq=False)
class JackknifeResult:
    theta_hat: float
    leave_one_out: np.ndarray
    se_jack: float
    subject_ids: tuple[str, ...] = ()
    failures: tuple[str, ...] = ()
    estimate: EffectEstimate | None = None

    @staticmethod
    def standard_error(values: np.ndarray) -> float:
        # centring on the first value keeps equal inputs exactly at zero
        values = np.asarray(values, float)
        x = values - values[0]
        n = values.size
        return float(math.sqrt((n - 1) / n * float(((x - x.mean()) ** 2).sum())))

    def inference(self, alpha: float = 0.05, theta0: float = 0.0) -> InferenceResult:
        return normal_inference(self.theta_hat, self.se_jack, alpha, theta0, "jackknife")

    def to_dict(self, alpha: float = 0.05) -> dict:
        return {**self.inference(alpha).to_dict(), "n": int(self.leave_one_out.size), "failures": list(self.failures)}


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    theta_hat: float
    draws: np.ndarray
    se_boot: float
    B: int
    seed: int
    replacements: int = 0
    estimate: EffectEstimate | None = None

    def inference(self, alpha: float = 0.05, theta0: float = 0.0) -> InferenceResult:
        return normal_inference(self.theta_hat, self.se_boot, alpha, theta0, "bootstrap")

    def percentile_inference(self, alpha: float = 0.05, theta0: float = 0.0) -> InferenceResult:
        lo, hi = percentile_ci(self, alpha)
        p = bootstrap_pvalue(self, theta0, "two-sided")
        return InferenceResult(self.theta_hat, self.se_boot, lo, hi, p, "bootstrap-percentile", alpha)

    def to_dict(self, alpha: float = 0.05, percentile: bool = False) -> dict:
        inf = self.percentile_inference(alpha) if percentile else self.inference(alpha)
        return {**inf.to_dict(), "B": self.B, "seed": self.seed, "failures": self.replacements}


# -- engine ------------------------------------------------------------------


class _Engine:
    """Arrays of one dataset prepared for repeated evaluation on subsets.

    ``overrides`` lists strategy overrides (``None`` = use the ICE records);
    each is evaluated on every subset, sharing REML fits between overrides
    whose masked outcomes are identical.
    """

    def __init__(self, d: TrialDataset, p: Pipeline, overrides: Sequence[Strategy | None]):
        self.d, self.p = d, p
        self.overrides = list(overrides)
        self.X = design_matrices(d, p.mean_spec)
        self.Xref = design_matrices(d, p.mean_spec, arm=0)
        self.columns = p.mean_spec.column_names(d.grid)
        self.j = p.ancova.visit_index(d.J) - 1
        self.anc_cov = np.column_stack([d.covariate_matrix(c)[:, self.j] for c in p.ancova.covariates]) \
            if p.ancova.covariates else np.zeros((d.n, 0))
        self.offset = d.covariate_matrix(p.ancova.baseline)[:, self.j] if p.ancova.dependent == "change" \
            else np.zeros(d.n)
        self.delta = None
        if p.delta is not None:
            target = np.isnan(d.outcomes) if p.delta.applies_to == "imputed" else post_ice_mask(d)
            self.delta = np.where(target, p.delta.matrix(d), 0.0)
        self.strategies = []
        masks: dict[bytes, int] = {}
        self.masked = []
        self.mask_of = []
        for s in self.overrides:
            strat = d.ice_strategy if s is None else tuple(s if np.isfinite(t) else None for t in d.t_tilde)
            if s is not None and s.reference_based and not d.has_ice.any():
                raise PipelineError("impute", ImputationError("reference-based strategy requires ICE records"))
            self.strategies.append(strat)
            targeted = np.array([x is not None and (x.reference_based or p.mask_mar_ice) for x in strat], bool)
            drop = post_ice_mask(d) & targeted[:, None]
            key = drop.tobytes()
            if key not in masks:
                masks[key] = len(self.masked)
                y = np.array(d.outcomes, copy=True)
                y[drop] = np.nan
                self.masked.append(y)
            self.mask_of.append(masks[key])
        self.levels = np.zeros(d.n, int) if p.cov_spec.grouping == "shared" else d.arm.astype(int)

    def evaluate(self, idx: np.ndarray | None = None, starts: Sequence[MmrmFit | None] | None = None):
        """Estimates for all overrides on subjects ``idx``; returns (estimates, fits)."""
        d, p = self.d, self.p
        idx = np.arange(d.n) if idx is None else np.asarray(idx)
        Y = d.outcomes[idx]
        arm = d.arm[idx]
        j = self.j
        need_fit = np.isnan(Y[:, j]).any()

        cov = self.anc_cov[idx]
        Xa = np.column_stack([np.ones(idx.size), arm.astype(float), cov - cov.mean(axis=0)])
        if Xa.shape[0] <= Xa.shape[1] or np.linalg.matrix_rank(Xa) < Xa.shape[1]:
            raise PipelineError("analysis", AnalysisError("ANCOVA design is rank deficient (constant or collinear covariate)"))
        ancova = _Ancova(Xa)
        offset = self.offset[idx]
        delta = None if self.delta is None else self.delta[idx]

        fits: list[MmrmFit | None] = [None] * len(self.masked)
        if need_fit:
            for k, Ym in enumerate(self.masked):
                if k not in self.mask_of:
                    continue
                start = starts[k] if starts is not None else None
                try:
                    fits[k] = _fit_arrays(self.X[idx], Ym[idx], self.levels[idx], p.cov_spec, p.fit_options,
                                          start, self.columns, d.grid)
                except FitError as exc:
                    raise PipelineError("fit", exc) from exc

        out = []
        conditioners = [_Conditioner() for _ in fits]
        for s_idx, strat in enumerate(self.strategies):
            k = self.mask_of[s_idx]
            fit = fits[k]
            if fit is None:
                filled = np.array(Y, copy=True)
            else:
                try:
                    beta = fit.beta
                    mt = mean_tilde(self.X[idx] @ beta, self.Xref[idx] @ beta, arm, d.t_tilde[idx],
                                    [strat[i] for i in idx], fit.grouping)
                    filled = fill_conditional_mean(Y, mt, fit.sigma, self.levels[idx], conditioners[k])
                except (ImputationError, np.linalg.LinAlgError) as exc:
                    raise PipelineError("impute", exc) from exc
            if delta is not None:
                filled = filled + delta
            out.append(ancova.estimate(filled[:, j] - offset))
        return out, fits

    def completed(self, s_idx: int) -> tuple[ImputedDataset, MmrmFit | None]:
        d = self.d
        k = self.mask_of[s_idx]
        fit = None
        filled = np.array(d.outcomes, copy=True)
        if np.isnan(d.outcomes).any():
            try:
                fit = _fit_arrays(self.X, self.masked[k], self.levels, self.p.cov_spec, self.p.fit_options,
                                  None, self.columns, d.grid)
            except FitError as exc:
                raise PipelineError("fit", exc) from exc
            beta = fit.beta
            mt = mean_tilde(self.X @ beta, self.Xref @ beta, d.arm, d.t_tilde, self.strategies[s_idx], fit.grouping)
            filled = fill_conditional_mean(d.outcomes, mt, fit.sigma, self.levels)
        if self.delta is not None:
            filled = filled + self.delta
        return ImputedDataset(d, filled, np.isnan(d.outcomes)), fit


def _check(d: TrialDataset) -> None:
    from .dataset import validate

    problems = validate(d)
    if problems:
        raise PipelineError("data", ValueError("; ".join(problems)))


def run_pipeline(d: TrialDataset, p: Pipeline) -> EffectEstimate:
    """Conditional-mean-imputation estimate of the treatment effect."""
    return estimate_strategies(d, p, [p.strategy])[p.strategy]


def impute(d: TrialDataset, p: Pipeline) -> tuple[ImputedDataset, MmrmFit | None]:
    """Completed dataset (all visits) and the imputation-model fit behind it."""
    _check(d)
    return _Engine(d, p, [p.strategy]).completed(0)


def estimate_strategies(d: TrialDataset, p: Pipeline, strategies: Sequence[Strategy | None]) -> dict:
    _check(d)
    engine = _Engine(d, p, strategies)
    estimates, _ = engine.evaluate()
    return dict(zip(strategies, estimates))


# -- jackknife ---------------------------------------------------------------


def _loo_chunk(engine: _Engine, indices: Sequence[int], starts):
    n = engine.d.n
    out = []
    for i in indices:
        keep = np.delete(np.arange(n), i)
        try:
            est, _ = engine.evaluate(keep, starts)
        except PipelineError as exc:
            raise JackknifeError(engine.d.subject_ids[i], exc) from exc
        out.append([e.theta for e in est])
    return out


def _chunks(n: int, jobs: int) -> list[list[int]]:
    size = max(1, math.ceil(n / (4 * jobs)))
    return [list(range(a, min(n, a + size))) for a in range(0, n, size)]


def jackknife_strategies(d: TrialDataset, p: Pipeline, strategies: Sequence[Strategy | None],
                         jobs: int = 1) -> dict:
    """Jackknife for several strategies, sharing the leave-one-out REML fits."""
    _check(d)
    engine = _Engine(d, p, strategies)
    full, fits = engine.evaluate()
    chunks = _chunks(d.n, jobs)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            parts = list(pool.map(_loo_chunk, [engine] * len(chunks), chunks, [fits] * len(chunks)))
    else:
        parts = [_loo_chunk(engine, c, fits) for c in chunks]
    loo = np.array([row for part in parts for row in part]).reshape(d.n, len(strategies))
    return {
        s: JackknifeResult(
            theta_hat=full[k].theta,
            leave_one_out=loo[:, k].copy(),
            se_jack=JackknifeResult.standard_error(loo[:, k]),
            subject_ids=d.subject_ids,
            estimate=full[k],
        )
        for k, s in enumerate(strategies)
    }


def jackknife(d: TrialDataset, p: Pipeline, jobs: int = 1) -> JackknifeResult:
    """Leave-one-subject-out jackknife standard error of the CMI estimate."""
    return jackknife_strategies(d, p, [p.strategy], jobs)[p.strategy]


# -- bootstrap ---------------------------------------------------------------


def _resample(rng: np.random.Generator, arm: np.ndarray, stratified: bool) -> np.ndarray:
    n = arm.size
    if not stratified:
        return np.sort(rng.integers(0, n, n))
    parts = []
    for a in (0, 1):
        members = np.flatnonzero(arm == a)
        parts.append(members[rng.integers(0, members.size, members.size)])
    return np.sort(np.concatenate(parts))


def _boot_chunk(engine: _Engine, replicates: Sequence[int], seed: int, stratified: bool, starts, max_attempts: int):
    out = []
    for b in replicates:
        attempt = 0
        while True:
            idx = _resample(substream(seed, b, attempt), engine.d.arm, stratified)
            try:
                est, _ = engine.evaluate(idx, starts)
                break
            except PipelineError as exc:
                attempt += 1
                log.info("bootstrap replicate %d attempt %d failed (%s); resampling", b, attempt, exc)
                if attempt > max_attempts:
                    raise BootstrapError(f"bootstrap replicate {b} failed {attempt} times") from exc
        out.append(([e.theta for e in est], attempt))
    return out


def bootstrap_strategies(d: TrialDataset, p: Pipeline, strategies: Sequence[Strategy | None], B: int,
                         seed: int, stratified: bool = False, jobs: int = 1) -> dict:
    """Nonparametric subject-level bootstrap, sharing REML fits across strategies.

    A replicate whose pipeline fails is redrawn from the next attempt
    substream; more than 0.1% * B replacements abort the run.
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    _check(d)
    engine = _Engine(d, p, strategies)
    full, fits = engine.evaluate()
    limit = 0.001 * B
    max_attempts = int(math.floor(limit)) + 1
    chunks = _chunks(B, jobs)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            parts = list(pool.map(_boot_chunk, [engine] * len(chunks), chunks, [seed] * len(chunks),
                                  [stratified] * len(chunks), [fits] * len(chunks), [max_attempts] * len(chunks)))
    else:
        parts = [_boot_chunk(engine, c, seed, stratified, fits, max_attempts) for c in chunks]
    rows = [r for part in parts for r in part]
    replacements = sum(a for _, a in rows)
    if replacements > limit:
        raise BootstrapError(f"{replacements} bootstrap resamples failed (limit {limit:g}); fits are unstable")
    if replacements:
        log.warning("%d bootstrap resamples replaced after fit failures", replacements)
    draws = np.array([r for r, _ in rows]).reshape(B, len(strategies))
    return {
        s: BootstrapResult(
            theta_hat=full[k].theta,
            draws=draws[:, k].copy(),
            se_boot=float(np.std(draws[:, k], ddof=1)) if B > 1 else math.nan,
            B=B,
            seed=seed,
            replacements=replacements,
            estimate=full[k],
        )
        for k, s in enumerate(strategies)
    }


def bootstrap(d: TrialDataset, p: Pipeline, B: int, seed: int, stratified: bool = False, jobs: int = 1) -> BootstrapResult:
    return bootstrap_strategies(d, p, [p.strategy], B, seed, stratified, jobs)[p.strategy]


def _draws(r) -> np.ndarray:
    return np.asarray(r.draws if isinstance(r, BootstrapResult) else r, float)


def percentile_ci(r: BootstrapResult | np.ndarray, alpha: float = 0.05) -> tuple[float, float]:
    """Interval between the (B+1)a/2-th and (B+1)(1-a/2)-th ordered draws.

    Fractional ranks are interpolated linearly between neighbouring order
    statistics.
    """
    x = np.sort(_draws(r))
    B = x.size
    lo_rank, hi_rank = (B + 1) * alpha / 2, (B + 1) * (1 - alpha / 2)
    if lo_rank < 1 - 1e-9 or hi_rank > B + 1e-9:
        raise ValueError(f"B={B} is too small for alpha={alpha}; need B >= {math.ceil(2 / alpha - 1)}")

    def at(rank: float) -> float:
        rank = min(max(rank, 1.0), float(B))
        k = int(math.floor(rank + 1e-9))
        frac = rank - k
        if k >= B or frac < 1e-9:
            return float(x[k - 1])
        return float(x[k - 1] + frac * (x[k] - x[k - 1]))

    return at(lo_rank), at(hi_rank)


def bootstrap_pvalue(r: BootstrapResult | np.ndarray, theta0: float = 0.0, direction: str = "two-sided") -> float:
    """Inverted-percentile p-value.

    ``direction="greater"`` tests H1: theta > theta0 with
    ``(#{draws < theta0} + 1) / (B + 1)``; ``"less"`` mirrors it and
    ``"two-sided"`` doubles the smaller of the two, capped at 1.
    """
    x = _draws(r)
    B = x.size
    greater = (np.count_nonzero(x < theta0) + 1) / (B + 1)
    less = (np.count_nonzero(x > theta0) + 1) / (B + 1)
    if direction == "greater":
        return float(greater)
    if direction == "less":
        return float(less)
    if direction == "two-sided":
        return float(min(1.0, 2 * min(greater, less)))
    raise ValueError("direction must be 'greater', 'less' or 'two-sided'")


# -- Monte Carlo accuracy of finite-B p-values ---------------------------------


@dataclass(frozen=True)
class PValueAccuracy:
    method: str
    p_inf: float
    B: int
    level: float
    low: float
    high: float
    threshold: float
    prob_at_or_below: float
    prob_above: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "prob_above", 1.0 - self.prob_at_or_below)


def _normal_cdf_at(p_inf: float, B: int, tau: float) -> float:
    """P(p_B <= tau) with p_B = Phi(z_inf / sqrt(Z/(B-1))), Z ~ chi2(B-1)."""
    z_inf, z_tau = stats.norm.ppf(p_inf), stats.norm.ppf(tau)
    chi = stats.chi2(B - 1)
    if z_tau == 0:
        return 1.0 if z_inf <= 0 else 0.0
    cut = (B - 1) * (z_inf / z_tau) ** 2
    if z_tau > 0:
        return 1.0 if z_inf <= 0 else float(chi.sf(cut))
    return 0.0 if z_inf >= 0 else float(chi.cdf(cut))


def pB_accuracy(method: str, p_inf: float, B: int, threshold: float = 0.025, level: float = 0.95) -> PValueAccuracy:
    """Distribution of a one-sided bootstrap p-value computed from B resamples.

    ``method="normal"``: p_B = Phi(Phi^-1(p_inf) / sqrt(Z/(B-1))), Z ~ chi2(B-1).
    ``method="percentile"``: p_B = (Z+1)/(B+1), Z ~ Bin(B, p_inf).
    Returns the central ``level`` range of p_B and P(p_B <= threshold).
    """
    if not 0 < p_inf < 1:
        raise ValueError("p_inf must lie strictly between 0 and 1")
    if B < 2:
        raise ValueError("B must be at least 2")
    tail = (1 - level) / 2
    if method == "normal":
        z_inf = stats.norm.ppf(p_inf)
        q = stats.chi2.ppf([tail, 1 - tail], B - 1)
        ends = stats.norm.cdf(z_inf / np.sqrt(q / (B - 1)))
        prob = _normal_cdf_at(p_inf, B, threshold)
    elif method == "percentile":
        q = stats.binom.ppf([tail, 1 - tail], B, p_inf)
        ends = (q + 1) / (B + 1)
        prob = float(stats.binom.cdf(math.floor(threshold * (B + 1) - 1 + 1e-9), B, p_inf))
    else:
        raise ValueError("method must be 'normal' or 'percentile'")
    low, high = float(min(ends)), float(max(ends))
    return PValueAccuracy(method, p_inf, B, level, low, high, threshold, prob)
