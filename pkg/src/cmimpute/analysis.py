"""ANCOVA of a completed dataset at one visit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import TrialDataset
from .impute import ImputedDataset

__all__ = ["AnalysisError", "AncovaSpec", "EffectEstimate", "fit_ancova", "ls_means", "ancova_design"]


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class AncovaSpec:
    """Analysis model: ``dependent ~ 1 + group + covariates`` at ``target_visit``.

    ``target_visit`` is 1-based (``None`` = last visit). With
    ``dependent="change"`` the value of the ``baseline`` covariate is
    subtracted from the outcome.
    """

    target_visit: int | None = None
    dependent: str = "change"
    covariates: tuple[str, ...] = ("baseline",)
    baseline: str | None = "baseline"

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.dependent not in ("outcome", "change"):
            raise ValueError("dependent must be 'outcome' or 'change'")
        if self.dependent == "change" and not self.baseline:
            raise ValueError("change from baseline needs the name of the baseline covariate")

    def visit_index(self, J: int) -> int:
        j = J if self.target_visit is None else self.target_visit
        if not 1 <= j <= J:
            raise AnalysisError(f"target visit {j} outside 1..{J}")
        return j


@dataclass(frozen=True)
class EffectEstimate:
    theta: float
    lsmean_control: float
    lsmean_intervention: float
    residual_df: int


def ancova_design(d: TrialDataset, spec: AncovaSpec) -> tuple[np.ndarray, np.ndarray, int]:
    """Design ``[1, group, centred covariates]``, dependent offset, and target column."""
    j = spec.visit_index(d.J) - 1
    cols = [np.ones(d.n), d.arm.astype(float)]
    for c in spec.covariates:
        v = d.covariate_matrix(c)[:, j]
        cols.append(v - v.mean())
    X = np.column_stack(cols)
    offset = d.covariate_matrix(spec.baseline)[:, j] if spec.dependent == "change" else np.zeros(d.n)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise AnalysisError("ANCOVA design is rank deficient (constant or collinear covariate)")
    return X, np.asarray(offset, float), j


class _Ancova:
    """Least-squares solver for a fixed design, reused across completed datasets."""

    def __init__(self, X: np.ndarray):
        self.X = X
        self.pinv = np.linalg.pinv(X)
        self.df = X.shape[0] - X.shape[1]

    def coef(self, y: np.ndarray) -> np.ndarray:
        return self.pinv @ y

    def estimate(self, y: np.ndarray) -> EffectEstimate:
        b = self.coef(y)
        # covariates are centred, so the intercept is the control LS mean
        return EffectEstimate(float(b[1]), float(b[0]), float(b[0] + b[1]), self.df)


def fit_ancova(data: ImputedDataset | TrialDataset, spec: AncovaSpec) -> EffectEstimate:
    """Treatment coefficient and LS means from least squares at the target visit."""
    d, Y = (data.base, data.filled) if isinstance(data, ImputedDataset) else (data, data.outcomes)
    X, offset, j = ancova_design(d, spec)
    y = Y[:, j] - offset
    if np.isnan(y).any():
        raise AnalysisError("missing values at the target visit")
    if X.shape[0] <= X.shape[1]:
        raise AnalysisError("not enough subjects for the ANCOVA model")
    return _Ancova(X).estimate(y)


def ls_means(fit: EffectEstimate) -> tuple[float, float]:
    """(control, intervention) predictions at the overall covariate means."""
    return fit.lsmean_control, fit.lsmean_intervention
