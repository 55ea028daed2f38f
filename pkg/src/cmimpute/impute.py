"""Marginal imputation distributions and conditional-mean imputation.

For every subject the fitted model gives a marginal normal distribution
``N(mu_tilde, Sigma_tilde)`` whose mean depends on the imputation strategy
(MAR, or the reference-based CR/J2R/CIR rules). Missing outcomes are replaced
by their conditional expectation given all observed outcomes of that
subject, including observed post-ICE values.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dataset import Strategy, Subject, TrialDataset, post_ice_mask
from .mmrm import MeanModelSpec, MmrmFit, design_matrices
from .rng import substream

__all__ = [
    "ImputationError",
    "MarginalDistribution",
    "ImputedDataset",
    "DeltaAdjustment",
    "marginal_distribution",
    "marginal_means",
    "mean_tilde",
    "fill_conditional_mean",
    "conditional_mean_impute",
    "random_impute",
    "impute_dataset",
    "random_impute_dataset",
    "apply_delta",
]


class ImputationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MarginalDistribution:
    mu_tilde: np.ndarray
    sigma_tilde: np.ndarray


@dataclass(frozen=True, eq=False)
class ImputedDataset:
    """Completed outcomes; ``imputed`` flags cells that were filled in."""

    base: TrialDataset
    filled: np.ndarray
    imputed: np.ndarray

    @property
    def provenance(self) -> np.ndarray:
        return np.where(self.imputed, "imputed", "observed")


@dataclass(frozen=True)
class DeltaAdjustment:
    """Offsets added to imputed (or all post-ICE) cells before analysis.

    ``offsets`` maps subject id to a length-J vector; ``group_offsets`` maps a
    group label to a vector used for subjects without their own entry.
    """

    offsets: Mapping[str, Sequence[float]] = field(default_factory=dict)
    group_offsets: Mapping[str, Sequence[float]] = field(default_factory=dict)
    applies_to: str = "imputed"

    def __post_init__(self):
        if self.applies_to not in ("imputed", "post_ice"):
            raise ValueError("applies_to must be 'imputed' or 'post_ice'")
        for v in [*self.offsets.values(), *self.group_offsets.values()]:
            if not np.all(np.isfinite(v)):
                raise ValueError("delta offsets must be finite")

    def matrix(self, d: TrialDataset) -> np.ndarray:
        out = np.zeros((d.n, d.J))
        for i, sid in enumerate(d.subject_ids):
            sid = sid.split("#", 1)[0]
            if sid in self.offsets:
                out[i] = self.offsets[sid]
            elif d.group_labels[d.arm[i]] in self.group_offsets:
                out[i] = self.group_offsets[d.group_labels[d.arm[i]]]
        return out


# -- marginal distribution ---------------------------------------------------


def _apply_strategy(mu, mu_ref, t_tilde, strategy):
    """Reference-based mean for an intervention subject with ICE after visit t_tilde."""
    if strategy is None or strategy is Strategy.MAR or not np.isfinite(t_tilde):
        return mu
    if strategy is Strategy.CR:
        return mu_ref.copy()
    t = int(t_tilde)
    out = mu.copy()
    if strategy is Strategy.J2R:
        out[t:] = mu_ref[t:]
    elif strategy is Strategy.CIR:
        # with t == 0 both arms share the baseline anchor, so this reduces to CR
        anchor = mu[t - 1] - mu_ref[t - 1] if t > 0 else 0.0
        out[t:] = mu_ref[t:] + anchor
    return out


def mean_tilde(
    mu: np.ndarray,
    mu_ref: np.ndarray,
    arm: np.ndarray,
    t_tilde: np.ndarray,
    strategies: Sequence[Strategy | None],
    grouping: str = "shared",
) -> np.ndarray:
    """Apply the strategy rules row-wise to predicted means ``mu``/``mu_ref``."""
    reference = np.array([s is not None and s.reference_based for s in strategies], dtype=bool)
    reference &= np.isfinite(t_tilde) & (arm == 1)
    if reference.any() and grouping != "shared":
        raise ImputationError("reference-based imputation with group-specific covariances is not supported")
    out = np.array(mu, copy=True)
    for i in np.flatnonzero(reference):
        out[i] = _apply_strategy(mu[i], mu_ref[i], t_tilde[i], strategies[i])
    return out


def marginal_means(
    d: TrialDataset,
    fit: MmrmFit,
    spec: MeanModelSpec,
    strategies: Sequence[Strategy | None] | None = None,
) -> np.ndarray:
    """(n, J) matrix of mu_tilde. ``strategies`` defaults to the ICE records."""
    strategies = d.ice_strategy if strategies is None else strategies
    mu = design_matrices(d, spec) @ fit.beta
    mu_ref = design_matrices(d, spec, arm=0) @ fit.beta
    return mean_tilde(mu, mu_ref, d.arm, d.t_tilde, strategies, fit.grouping)


def marginal_distribution(
    s: Subject,
    fit: MmrmFit,
    strategy: Strategy | None,
    spec: MeanModelSpec,
    grid,
    group_labels: tuple[str, str] = ("control", "intervention"),
) -> MarginalDistribution:
    """Imputation distribution of one subject under ``strategy``.

    ``strategy=None`` means no reference-based rule applies (MAR).
    """
    if strategy is not None and strategy.reference_based:
        # control subjects keep their own (reference) means whatever the rule
        if s.ice is None and s.group != group_labels[0]:
            raise ImputationError(f"subject {s.subject_id}: reference-based strategy requires an ICE record")
        if fit.grouping != "shared":
            raise ImputationError("reference-based imputation with group-specific covariances is not supported")
    d = TrialDataset.from_subjects(grid, [s], group_labels)
    mu = marginal_means(d, fit, spec, [strategy])[0]
    return MarginalDistribution(mu, fit.sigma_for(int(d.arm[0])))


# -- conditioning ----------------------------------------------------------------


class _Conditioner:
    """Per-(pattern, covariance) regression and residual factors, cached."""

    def __init__(self):
        self._cache: dict = {}

    def get(self, sigma: np.ndarray, miss: np.ndarray, key):
        hit = self._cache.get((key, miss.tobytes()))
        if hit is not None:
            return hit
        q = np.flatnonzero(miss)
        o = np.flatnonzero(~miss)
        if o.size == 0:
            K = np.zeros((q.size, 0))
            cond = sigma[np.ix_(q, q)]
        else:
            try:
                c = scipy.linalg.cho_factor(sigma[np.ix_(o, o)], lower=True)
            except np.linalg.LinAlgError:
                cnum = np.linalg.cond(sigma[np.ix_(o, o)])
                raise ImputationError(f"observed-block covariance is singular (condition number {cnum:.3g})") from None
            K = scipy.linalg.cho_solve(c, sigma[np.ix_(o, q)]).T
            cond = sigma[np.ix_(q, q)] - K @ sigma[np.ix_(o, q)]
        entry = (o, q, K, cond)
        self._cache[(key, miss.tobytes())] = entry
        return entry


def conditional_mean_impute(s: Subject | np.ndarray, m: MarginalDistribution) -> np.ndarray:
    """Fill missing entries with E(Y_? | Y_!) under ``m``; observed entries are copied."""
    y = np.array(s.outcomes if isinstance(s, Subject) else s, dtype=float)
    miss = np.isnan(y)
    if not miss.any():
        return y
    o, q, K, _ = _Conditioner().get(np.asarray(m.sigma_tilde, float), miss, None)
    y[q] = m.mu_tilde[q] + K @ (y[o] - m.mu_tilde[o])
    return y


def random_impute(s: Subject | np.ndarray, m: MarginalDistribution, rng: np.random.Generator) -> np.ndarray:
    """Draw missing entries from the conditional normal given the observed ones."""
    y = np.array(s.outcomes if isinstance(s, Subject) else s, dtype=float)
    miss = np.isnan(y)
    if not miss.any():
        return y
    o, q, K, cond = _Conditioner().get(np.asarray(m.sigma_tilde, float), miss, None)
    L = np.linalg.cholesky(cond)
    y[q] = m.mu_tilde[q] + K @ (y[o] - m.mu_tilde[o]) + L @ rng.standard_normal(q.size)
    return y


def fill_conditional_mean(
    Y: np.ndarray,
    mu_tilde: np.ndarray,
    sigmas: Sequence[np.ndarray],
    levels: np.ndarray,
    conditioner: _Conditioner | None = None,
) -> np.ndarray:
    """Array form of conditional-mean imputation, batched by missingness pattern."""
    cond = conditioner or _Conditioner()
    filled = np.array(Y, copy=True)
    miss = np.isnan(Y)
    for (lev, _), members in _group_patterns(miss, levels).items():
        o, q, K, _ = cond.get(sigmas[lev], miss[members[0]], lev)
        resid = Y[np.ix_(members, o)] - mu_tilde[np.ix_(members, o)]
        filled[np.ix_(members, q)] = mu_tilde[np.ix_(members, q)] + resid @ K.T
    return filled


def impute_dataset(
    d: TrialDataset,
    fit: MmrmFit,
    mu_tilde: np.ndarray,
    conditioner: _Conditioner | None = None,
) -> ImputedDataset:
    """Conditional-mean imputation of every subject of ``d``."""
    levels = np.zeros(d.n, int) if fit.grouping == "shared" else d.arm.astype(int)
    filled = fill_conditional_mean(d.outcomes, mu_tilde, fit.sigma, levels, conditioner)
    return ImputedDataset(d, filled, np.isnan(d.outcomes))


def random_impute_dataset(
    d: TrialDataset,
    fit: MmrmFit,
    mu_tilde: np.ndarray,
    seed: int,
    draw: int,
    conditioner: _Conditioner | None = None,
) -> ImputedDataset:
    """One random imputation; subject ``i`` of draw ``m`` uses substream (seed, m, i)."""
    cond = conditioner or _Conditioner()
    Y = d.outcomes
    filled = np.array(Y, copy=True)
    miss = np.isnan(Y)
    levels = np.zeros(d.n, int) if fit.grouping == "shared" else d.arm.astype(int)
    for (lev, pattern), members in _group_patterns(miss, levels).items():
        m = miss[members[0]]
        o, q, K, C = cond.get(fit.sigma[lev], m, lev)
        key = ("chol", lev, pattern)
        L = cond._cache.get(key)
        if L is None:
            L = cond._cache[key] = np.linalg.cholesky(C)
        z = np.array([substream(seed, draw, i).standard_normal(q.size) for i in members])
        resid = Y[np.ix_(members, o)] - mu_tilde[np.ix_(members, o)]
        filled[np.ix_(members, q)] = mu_tilde[np.ix_(members, q)] + resid @ K.T + z @ L.T
    return ImputedDataset(d, filled, miss)


def _group_patterns(miss: np.ndarray, levels: np.ndarray) -> dict:
    groups: dict = {}
    for i in np.flatnonzero(miss.any(axis=1)):
        groups.setdefault((int(levels[i]), miss[i].tobytes()), []).append(i)
    return {k: np.array(v) for k, v in groups.items()}


def apply_delta(imp: ImputedDataset, delta: DeltaAdjustment) -> ImputedDataset:
    """Shift targeted cells by the offsets; provenance flags are unchanged."""
    offsets = delta.matrix(imp.base)
    target = imp.imputed if delta.applies_to == "imputed" else post_ice_mask(imp.base)
    filled = imp.filled + np.where(target, offsets, 0.0)
    return ImputedDataset(imp.base, filled, imp.imputed)
