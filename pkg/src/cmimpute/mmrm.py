"""Mixed model for repeated measures with unstructured covariance, fitted by REML.

The mean model is ``Y_i = X_i beta + eps_i`` with ``eps_i ~ N(0, Sigma)``;
subjects contribute only their observed rows. ``beta`` is profiled out by
generalised least squares and the restricted log-likelihood is maximised
over a log-Cholesky parametrisation of ``Sigma`` (log of the diagonal, free
sub-diagonal), which keeps every iterate positive definite.

Subjects sharing a missingness pattern share ``Sigma_{!!}``, so the REML
objective and its analytic gradient are evaluated from per-pattern
cross-product tensors that are computed once per dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import minimize

from .dataset import Subject, TrialDataset, VisitGrid

__all__ = [
    "FitError",
    "RankDeficiencyError",
    "MissingVisitError",
    "ConvergenceError",
    "SingularCovarianceError",
    "MeanModelSpec",
    "CovarianceSpec",
    "FitOptions",
    "MmrmFit",
    "build_design",
    "design_matrices",
    "subset_rows",
    "profile_beta",
    "fit_reml",
]

LOG_2PI = math.log(2 * math.pi)


class FitError(RuntimeError):
    """Base class for imputation-model fitting failures."""


class RankDeficiencyError(FitError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"design is rank deficient; offending columns: {', '.join(self.columns)}")


class MissingVisitError(FitError):
    pass


class SingularCovarianceError(FitError):
    pass


class ConvergenceError(FitError):
    def __init__(self, message, best: "MmrmFit"):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class MeanModelSpec:
    """Mean structure of the imputation model.

    Intercept, visit, group and group-by-visit terms are always included
    (visit 1 and the control group are the reference levels). The tuples
    name covariates entering as main effects and as interactions.
    """

    covariates: tuple[str, ...] = ()
    covariate_by_visit: tuple[str, ...] = ()
    covariate_by_group: tuple[str, ...] = ()
    covariate_by_group_by_visit: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("covariates", "covariate_by_visit", "covariate_by_group", "covariate_by_group_by_visit"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def used_covariates(self) -> tuple[str, ...]:
        seen = []
        for group in (self.covariates, self.covariate_by_visit, self.covariate_by_group, self.covariate_by_group_by_visit):
            seen.extend(c for c in group if c not in seen)
        return tuple(seen)

    def column_names(self, grid: VisitGrid) -> list[str]:
        later = grid.labels[1:]
        names = ["intercept", *(f"visit[{v}]" for v in later), "group", *(f"group:visit[{v}]" for v in later)]
        names += list(self.covariates)
        for c in self.covariate_by_visit:
            names += [f"{c}:visit[{v}]" for v in later]
        names += [f"{c}:group" for c in self.covariate_by_group]
        for c in self.covariate_by_group_by_visit:
            names += [f"{c}:group:visit[{v}]" for v in later]
        return names


@dataclass(frozen=True)
class CovarianceSpec:
    structure: str = "unstructured"
    grouping: str = "shared"

    def __post_init__(self):
        if self.structure != "unstructured":
            raise ValueError("only the unstructured covariance is supported")
        if self.grouping not in ("shared", "by_group"):
            raise ValueError("grouping must be 'shared' or 'by_group'")

    @property
    def n_levels(self) -> int:
        return 1 if self.grouping == "shared" else 2


@dataclass(frozen=True)
class FitOptions:
    tol: float = 1e-8
    gtol: float = 1e-6
    max_iter: int = 200


@dataclass(frozen=True, eq=False)
class MmrmFit:
    beta: np.ndarray
    sigma: tuple[np.ndarray, ...]
    reml_loglik: float
    converged: bool
    iterations: int
    grouping: str = "shared"
    columns: tuple[str, ...] = ()
    theta: np.ndarray | None = None
    hess_inv: np.ndarray | None = field(default=None, repr=False)
    grad_norm: float = math.nan
    history: tuple[float, ...] = field(default=(), repr=False)

    def sigma_for(self, arm: int) -> np.ndarray:
        return self.sigma[0] if self.grouping == "shared" else self.sigma[arm]

    def diagnostics(self) -> dict:
        return {
            "reml_loglik": self.reml_loglik,
            "converged": self.converged,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "grouping": self.grouping,
        }


# -- design ------------------------------------------------------------------


def design_matrices(d: TrialDataset, spec: MeanModelSpec, arm: np.ndarray | int | None = None) -> np.ndarray:
    """(n, J, p) design array. ``arm`` overrides the group coding (e.g. 0 for X_ref)."""
    n, J = d.n, d.J
    a = d.arm.astype(float) if arm is None else np.broadcast_to(np.asarray(arm, float), (n,))
    visit = np.eye(J)[:, 1:]
    cols = [
        np.ones((n, J, 1)),
        np.broadcast_to(visit, (n, J, J - 1)),
        np.broadcast_to(a[:, None, None], (n, J, 1)),
        a[:, None, None] * visit[None],
    ]
    for c in spec.covariates:
        cols.append(d.covariate_matrix(c)[:, :, None])
    for c in spec.covariate_by_visit:
        cols.append(d.covariate_matrix(c)[:, :, None] * visit[None])
    for c in spec.covariate_by_group:
        cols.append((d.covariate_matrix(c) * a[:, None])[:, :, None])
    for c in spec.covariate_by_group_by_visit:
        cols.append((d.covariate_matrix(c) * a[:, None])[:, :, None] * visit[None])
    return np.concatenate(cols, axis=2)


def build_design(s: Subject, spec: MeanModelSpec, as_group: str, grid: VisitGrid,
                 group_labels: tuple[str, str] = ("control", "intervention")) -> np.ndarray:
    """J x p design for one subject, coded as if assigned to ``as_group``.

    Covariates (baseline and time-varying) keep the subject's own values;
    only the treatment indicator and its interactions follow ``as_group``.
    """
    single = TrialDataset.from_subjects(grid, [s], group_labels)
    return design_matrices(single, spec, arm=group_labels.index(as_group))[0]


def subset_rows(X: np.ndarray, observed) -> np.ndarray:
    """Rows of ``X`` for the 1-based visit indices in ``observed``, in visit order."""
    idx = np.array(sorted(observed), dtype=int) - 1
    return X[idx] if idx.size else X[:0]


def _check_rank(X: np.ndarray, Y: np.ndarray, columns) -> None:
    obs = ~np.isnan(Y)
    stacked = X[obs]
    if stacked.shape[0] == 0:
        raise RankDeficiencyError(columns)
    scale = np.sqrt((stacked**2).sum(axis=0))
    scale[scale == 0] = 1.0
    _, R, piv = scipy.linalg.qr(stacked / scale, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(stacked.shape) * np.finfo(float).eps * (diag[0] if diag.size else 1.0) * 1e3
    rank = int((diag > tol).sum())
    if rank < X.shape[2]:
        raise RankDeficiencyError([columns[k] for k in sorted(piv[rank:])])


# -- REML objective ------------------------------------------------------------


class _PatternStats:
    """Cross-product tensors for subjects grouped by (level, observed pattern).

    Blocks with the same number of observed visits are stacked so that each
    objective evaluation is a handful of batched matrix operations.
    """

    def __init__(self, X: np.ndarray, Y: np.ndarray, level: np.ndarray, n_levels: int):
        n, J, p = X.shape
        self.J, self.p, self.n_levels = J, p, n_levels
        obs = ~np.isnan(Y)
        self.n_obs = int(obs.sum())
        keys: dict[tuple, list[int]] = {}
        for i in range(n):
            if obs[i].any():
                keys.setdefault((int(level[i]), obs[i].tobytes()), []).append(i)
        stacks: dict[tuple[int, int], list] = {}
        for (lev, _), members in keys.items():
            o = np.flatnonzero(obs[members[0]])
            Xo = X[members][:, o, :]
            Yo = Y[members][:, o]
            m = o.size
            Xf = Xo.reshape(len(members), m * p)
            entry = (
                o,
                (Xf.T @ Xf).reshape(m, p, m, p).transpose(0, 2, 1, 3),
                (Xf.T @ Yo).reshape(m, p, m).transpose(0, 2, 1),
                Yo.T @ Yo,
                len(members),
            )
            stacks.setdefault((lev, o.size), []).append(entry)
        self.stacks = []
        for (lev, m), entries in sorted(stacks.items()):
            k = len(entries)
            self.stacks.append(
                dict(
                    level=lev,
                    m=m,
                    O=np.array([e[0] for e in entries]),
                    XX=np.array([e[1] for e in entries]).reshape(k * m * m, p * p),
                    XY=np.array([e[2] for e in entries]).reshape(k * m * m, p),
                    YY=np.array([e[3] for e in entries]),
                    cnt=np.array([e[4] for e in entries], dtype=float),
                )
            )

    def gls(self, sigmas):
        """Weighted cross-products for fixed covariance matrices."""
        p = self.p
        XtVX = np.zeros((p, p))
        XtVy = np.zeros(p)
        ytVy = 0.0
        logdet = 0.0
        cache = []
        for st in self.stacks:
            O = st["O"]
            S = sigmas[st["level"]][O[:, :, None], O[:, None, :]]
            C = np.linalg.cholesky(S)
            V = np.linalg.inv(S)
            V = 0.5 * (V + V.transpose(0, 2, 1))
            logdet += 2.0 * float(st["cnt"] @ np.log(np.diagonal(C, axis1=1, axis2=2)).sum(axis=1))
            vflat = V.reshape(-1)
            XtVX += (vflat @ st["XX"]).reshape(p, p)
            XtVy += vflat @ st["XY"]
            ytVy += float((V * st["YY"]).sum())
            cache.append(V)
        return XtVX, XtVy, ytVy, logdet, cache

    def loglik(self, sigmas, with_grad: bool = False):
        p = self.p
        XtVX, XtVy, ytVy, logdet, Vs = self.gls(sigmas)
        Cx = np.linalg.cholesky(XtVX)
        beta = scipy.linalg.cho_solve((Cx, True), XtVy)
        quad = ytVy - float(beta @ XtVy)
        ll = -0.5 * (logdet + 2.0 * np.log(np.diag(Cx)).sum() + quad + (self.n_obs - p) * LOG_2PI)
        if not with_grad:
            return ll, beta
        A = scipy.linalg.cho_solve((Cx, True), np.eye(p))
        bb = np.outer(beta, beta).reshape(-1)
        W = [np.zeros((self.J, self.J)) for _ in range(self.n_levels)]
        for st, V in zip(self.stacks, Vs):
            k, m = len(st["cnt"]), st["m"]
            Cm = (st["XY"] @ beta).reshape(k, m, m)
            D = (st["XX"] @ bb).reshape(k, m, m)
            Q = (st["XX"] @ A.reshape(-1)).reshape(k, m, m)
            R = st["YY"] - Cm - Cm.transpose(0, 2, 1) + D
            M = st["cnt"][:, None, None] * V - V @ (R + Q) @ V
            O = st["O"]
            np.add.at(W[st["level"]], (O[:, :, None], O[:, None, :]), M)
        # d loglik = -0.5 tr(W dSigma)
        return ll, beta, W


def _unpack(theta: np.ndarray, J: int, n_levels: int):
    rows, cols = np.tril_indices(J)
    k = rows.size
    Ls = []
    for lev in range(n_levels):
        L = np.zeros((J, J))
        L[rows, cols] = theta[lev * k:(lev + 1) * k]
        d = np.arange(J)
        L[d, d] = np.exp(L[d, d])
        Ls.append(L)
    return Ls


def _pack(sigmas) -> np.ndarray:
    out = []
    for S in sigmas:
        L = np.linalg.cholesky(S)
        J = L.shape[0]
        L[np.arange(J), np.arange(J)] = np.log(np.diag(L))
        out.append(L[np.tril_indices(J)])
    return np.concatenate(out)


class RemlObjective:
    """Negative REML log-likelihood over log-Cholesky parameters."""

    def __init__(self, stats: _PatternStats):
        self.stats = stats
        self.J = stats.J
        self.n_levels = stats.n_levels

    def sigmas(self, theta):
        return [L @ L.T for L in _unpack(theta, self.J, self.n_levels)]

    def __call__(self, theta):
        Ls = _unpack(theta, self.J, self.n_levels)
        try:
            ll, _, W = self.stats.loglik([L @ L.T for L in Ls], with_grad=True)
        except np.linalg.LinAlgError:
            return np.inf, np.zeros_like(theta)
        rows, cols = np.tril_indices(self.J)
        diag = rows == cols
        grads = []
        for L, Wl in zip(Ls, W):
            # d loglik / dL = -W L ; chain rule through exp on the diagonal
            g = (Wl @ L)[rows, cols]
            g[diag] *= np.diag(L)
            grads.append(g)
        return -ll, np.concatenate(grads)


def _levels(d: TrialDataset, cov_spec: CovarianceSpec) -> np.ndarray:
    return np.zeros(d.n, dtype=int) if cov_spec.grouping == "shared" else d.arm.astype(int)


def profile_beta(d: TrialDataset, spec: MeanModelSpec, sigma, cov_spec: CovarianceSpec = CovarianceSpec()) -> np.ndarray:
    """GLS estimate of beta at fixed covariance (a matrix, or one per level)."""
    X = design_matrices(d, spec)
    Y = d.outcomes
    _check_rank(X, Y, spec.column_names(d.grid))
    sigmas = [np.asarray(sigma, float)] if np.ndim(sigma) == 2 else [np.asarray(s, float) for s in sigma]
    stats = _PatternStats(X, Y, _levels(d, cov_spec), cov_spec.n_levels)
    XtVX, XtVy, *_ = stats.gls(sigmas)
    return np.linalg.solve(XtVX, XtVy)


def _start_sigma(X, Y, level, n_levels):
    """Pairwise-complete covariance of OLS residuals, shrunk until PD."""
    obs = ~np.isnan(Y)
    Xs, ys = X[obs], Y[obs]
    beta, *_ = np.linalg.lstsq(Xs, ys, rcond=None)
    resid = np.where(obs, np.nan_to_num(Y) - X @ beta, 0.0)
    out = []
    for lev in range(n_levels):
        sel = level == lev
        r, o = resid[sel], obs[sel].astype(float)
        cnt = o.T @ o
        S = (r.T @ r) / np.maximum(cnt - 1, 1)
        diag = np.diag(S).copy()
        diag[~np.isfinite(diag) | (diag <= 0)] = max(float(np.nanmean(diag[diag > 0])) if (diag > 0).any() else 1.0, 1e-8)
        S[np.diag_indices_from(S)] = diag
        for _ in range(200):
            if np.linalg.eigvalsh(S)[0] > 1e-8 * np.trace(S):
                break
            S = 0.95 * S + 0.05 * np.diag(np.diag(S))
        out.append(S)
    return out


def _check_visits(Y: np.ndarray, level: np.ndarray, n_levels: int, grid: VisitGrid) -> None:
    obs = ~np.isnan(Y)
    for lev in range(n_levels):
        counts = obs[level == lev].sum(axis=0)
        empty = [grid.labels[j] for j in np.flatnonzero(counts == 0)]
        if empty:
            raise MissingVisitError(f"visit without observations: {', '.join(empty)}")


def fit_reml(
    d: TrialDataset,
    mean_spec: MeanModelSpec,
    cov_spec: CovarianceSpec = CovarianceSpec(),
    options: FitOptions = FitOptions(),
    start: MmrmFit | None = None,
    design: np.ndarray | None = None,
) -> MmrmFit:
    """REML fit of the imputation model to (already masked) data.

    ``start`` warm-starts the optimiser from a previous fit's parameters and
    inverse-Hessian approximation. ``design`` may pass precomputed
    :func:`design_matrices` output.
    """
    X = design_matrices(d, mean_spec) if design is None else design
    return _fit_arrays(X, d.outcomes, _levels(d, cov_spec), cov_spec, options, start,
                       mean_spec.column_names(d.grid), d.grid)


def _fit_arrays(X, Y, level, cov_spec, options, start, columns, grid) -> MmrmFit:
    n_levels = cov_spec.n_levels
    _check_visits(Y, level, n_levels, grid)
    _check_rank(X, Y, columns)
    stats = _PatternStats(X, Y, level, n_levels)
    objective = RemlObjective(stats)

    if start is not None and start.theta is not None:
        theta0 = start.theta
        hess0 = _positive_definite(start.hess_inv)
    else:
        theta0 = _pack(_start_sigma(X, Y, level, n_levels))
        hess0 = None

    history: list[float] = []
    f0, _ = objective(theta0)
    history.append(-f0)

    def record(intermediate_result):
        history.append(-float(intermediate_result.fun))

    chord = _chord_newton(objective, theta0, hess0, options, min(25, options.max_iter)) \
        if hess0 is not None else None
    if chord is not None:
        theta, fval, grad, steps = chord
        history.extend(steps)
        hess_inv = hess0
        iterations = len(steps)
    else:
        opts = {"gtol": options.gtol, "maxiter": options.max_iter, "xrtol": 0.0}
        if hess0 is not None:
            opts["hess_inv0"] = hess0
        res = minimize(objective, theta0, jac=True, method="BFGS", options=opts, callback=record)
        theta, fval, grad = res.x, float(res.fun), np.asarray(res.jac)
        hess_inv = np.asarray(res.hess_inv)
        iterations = int(res.nit)

    # BFGS can stall on round-off just short of gtol; finish with Newton steps
    # on a finite-difference Hessian of the analytic gradient.
    polish = 0
    while (np.max(np.abs(grad)) >= options.gtol and polish < 8 and iterations < options.max_iter
           and np.isfinite(fval)):
        H = _fd_hessian(objective, theta)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            break
        f_new, g_new = objective(theta - step)
        if not (f_new <= fval + 1e-10 * max(1.0, abs(fval)) and np.max(np.abs(g_new)) < np.max(np.abs(grad))):
            break
        theta, fval, grad = theta - step, f_new, g_new
        if f_new <= -history[-1]:
            history.append(-f_new)
        hess_inv = np.linalg.inv(0.5 * (H + H.T))
        polish += 1
        iterations += 1

    if chord is None and polish == 0 and np.isfinite(fval) and start is None:
        # a cold fit keeps an accurate inverse Hessian for later warm starts
        hess_inv = _positive_definite(np.linalg.pinv(_fd_hessian(objective, theta)))
        if hess_inv is None:
            hess_inv = np.asarray(res.hess_inv)

    rel_change = abs(history[-1] - history[-2]) / max(1.0, abs(history[-1])) if len(history) > 1 else 0.0
    gnorm = float(np.max(np.abs(grad)))
    converged = bool(np.isfinite(fval) and gnorm < options.gtol and rel_change < options.tol)
    sigmas = objective.sigmas(theta)
    try:
        ll, beta = stats.loglik(sigmas)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError(
            f"covariance estimate became singular after {iterations} iterations "
            "(too few observations to estimate an unstructured covariance?)"
        ) from None
    fit = MmrmFit(
        beta=beta,
        sigma=tuple(0.5 * (S + S.T) for S in sigmas),
        reml_loglik=float(ll),
        converged=converged,
        iterations=iterations,
        grouping=cov_spec.grouping,
        columns=tuple(columns),
        theta=theta,
        hess_inv=hess_inv,
        grad_norm=gnorm,
        history=tuple(history),
    )
    if not converged:
        raise ConvergenceError(
            f"REML did not converge after {iterations} iterations (gradient {gnorm:.2e})", fit
        )
    return fit


def _chord_newton(objective, theta, hess_inv, options, max_steps=25):
    """Newton steps with a fixed inverse Hessian from a nearby fit.

    Returns None when a step fails to decrease the objective, so the caller
    can fall back to BFGS.
    """
    fval, grad = objective(theta)
    if not np.isfinite(fval):
        return None
    steps = []
    for _ in range(max_steps):
        new = theta - hess_inv @ grad
        f_new, g_new = objective(new)
        if not np.isfinite(f_new) or f_new > fval + 1e-12 * max(1.0, abs(fval)):
            return None
        rel = abs(f_new - fval) / max(1.0, abs(f_new))
        theta, fval, grad = new, float(f_new), g_new
        steps.append(-fval)
        if np.max(np.abs(grad)) < options.gtol and rel < options.tol:
            return theta, fval, grad, steps
    return None


def _positive_definite(H):
    """Symmetrised copy of ``H`` with eigenvalues floored, or None if unusable."""
    if H is None:
        return None
    H = 0.5 * (np.asarray(H, float) + np.asarray(H, float).T)
    if not np.all(np.isfinite(H)):
        return None
    w, V = np.linalg.eigh(H)
    if w[-1] <= 0:
        return None
    w = np.maximum(w, 1e-8 * w[-1])
    H = (V * w) @ V.T
    # the optimiser requires exact symmetry
    return np.triu(H) + np.triu(H, 1).T


def _fd_hessian(objective, theta, h=1e-5):
    k = theta.size
    H = np.empty((k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = h
        H[:, j] = (objective(theta + e)[1] - objective(theta - e)[1]) / (2 * h)
    return 0.5 * (H + H.T)
