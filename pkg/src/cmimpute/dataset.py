"""Trial data: ingestion, validation and the observed/masked views.

A :class:`TrialDataset` is array-backed (subjects x visits) so that the
resampling loops can slice it cheaply; :class:`Subject` objects are
materialised on demand for per-subject work and for readability in tests.

Intercurrent events are stored per subject as ``t_tilde`` (1-based index of
the last visit before the event) with ``inf`` meaning "no event".
"""

from __future__ import annotations

import csv
import enum
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DatasetError",
    "Strategy",
    "VisitGrid",
    "IceRecord",
    "Subject",
    "DataSchema",
    "TrialDataset",
    "load_csv",
    "write_csv",
    "mask_for_imputation",
    "post_ice_mask",
    "split_observed_missing",
    "validate",
]

MISSING_TOKENS = ("", "NA")


class DatasetError(ValueError):
    """Raised when input data cannot be turned into a valid dataset."""


class Strategy(str, enum.Enum):
    MAR = "MAR"
    CR = "CR"
    J2R = "J2R"
    CIR = "CIR"

    @property
    def reference_based(self) -> bool:
        return self is not Strategy.MAR

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        try:
            return cls(text)
        except ValueError:
            raise DatasetError(f"malformed strategy string {text!r}") from None


@dataclass(frozen=True)
class VisitGrid:
    labels: tuple[str, ...]
    baseline_label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(str(x) for x in self.labels))
        if len(self.labels) < 1:
            raise DatasetError("visit grid needs at least one follow-up visit")
        if len(set(self.labels)) != len(self.labels):
            raise DatasetError("visit labels must be unique")
        if self.baseline_label is not None and self.baseline_label in self.labels:
            raise DatasetError("baseline label must not be one of the follow-up visits")

    @property
    def J(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        """1-based position of ``label``."""
        try:
            return self.labels.index(str(label)) + 1
        except ValueError:
            raise DatasetError(f"unknown visit label {label!r}") from None


@dataclass(frozen=True)
class IceRecord:
    subject_id: str
    t_tilde: int
    strategy: Strategy
    # hypothetical-strategy ICEs require post-ICE outcomes to be missing already
    hypothetical: bool = False


@dataclass(frozen=True, eq=False)
class Subject:
    subject_id: str
    group: str
    covariates: Mapping[str, float | np.ndarray]
    outcomes: np.ndarray
    ice: IceRecord | None = None

    @property
    def t_tilde(self) -> float:
        return math.inf if self.ice is None else self.ice.t_tilde


@dataclass(frozen=True)
class DataSchema:
    """What the long-format file is expected to contain.

    ``covariates`` maps a column name to ``"baseline"`` (constant within a
    subject) or ``"time_varying"`` (one value per visit).
    """

    visits: tuple[str, ...]
    covariates: Mapping[str, str] = field(default_factory=dict)
    reference_group: str = "control"
    baseline_label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "visits", tuple(str(v) for v in self.visits))
        for name, kind in self.covariates.items():
            if kind not in ("baseline", "time_varying"):
                raise DatasetError(f"covariate {name!r}: kind must be 'baseline' or 'time_varying'")

    @property
    def grid(self) -> VisitGrid:
        return VisitGrid(self.visits, self.baseline_label)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Subjects x visits outcome matrix plus groups, covariates and ICEs.

    Attributes
    ----------
    arm : (n,) int array, 0 = control (reference) and 1 = intervention.
    outcomes : (n, J) float array with NaN for missing assessments.
    covariates : name -> (n,) array for baseline covariates or (n, J) array
        for time-varying ones.
    t_tilde : (n,) float array; ``inf`` when the subject has no ICE.
    """

    grid: VisitGrid
    subject_ids: tuple[str, ...]
    arm: np.ndarray
    outcomes: np.ndarray
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)
    t_tilde: np.ndarray | None = None
    ice_strategy: tuple[Strategy | None, ...] | None = None
    ice_hypothetical: np.ndarray | None = None
    group_labels: tuple[str, str] = ("control", "intervention")

    def __post_init__(self):
        n = len(self.subject_ids)
        J = self.grid.J
        set_ = object.__setattr__
        set_(self, "subject_ids", tuple(str(s) for s in self.subject_ids))
        set_(self, "arm", _readonly(np.asarray(self.arm, dtype=np.int8)))
        set_(self, "outcomes", _readonly(np.asarray(self.outcomes, dtype=float)))
        if self.arm.shape != (n,) or self.outcomes.shape != (n, J):
            raise DatasetError(f"expected arm of shape ({n},) and outcomes of shape ({n}, {J})")
        if not np.isin(self.arm, (0, 1)).all():
            raise DatasetError("arm must be coded 0 (control) / 1 (intervention)")
        covs = {}
        for name, values in self.covariates.items():
            values = np.asarray(values, dtype=float)
            if values.shape not in ((n,), (n, J)):
                raise DatasetError(f"covariate {name!r} has shape {values.shape}")
            covs[name] = _readonly(values)
        set_(self, "covariates", covs)
        tt = np.full(n, np.inf) if self.t_tilde is None else np.asarray(self.t_tilde, dtype=float)
        strat = (None,) * n if self.ice_strategy is None else tuple(self.ice_strategy)
        hyp = np.zeros(n, bool) if self.ice_hypothetical is None else np.asarray(self.ice_hypothetical, bool)
        if tt.shape != (n,) or len(strat) != n or hyp.shape != (n,):
            raise DatasetError("ICE arrays must have one entry per subject")
        set_(self, "t_tilde", _readonly(tt))
        set_(self, "ice_strategy", strat)
        set_(self, "ice_hypothetical", _readonly(hyp))
        set_(self, "group_labels", tuple(self.group_labels))

    # -- shape ---------------------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.subject_ids)

    @property
    def J(self) -> int:
        return self.grid.J

    @property
    def has_ice(self) -> np.ndarray:
        return np.isfinite(self.t_tilde)

    def covariate_matrix(self, name: str) -> np.ndarray:
        """Covariate values broadcast to (n, J)."""
        v = self.covariates[name]
        return np.broadcast_to(v[:, None], (self.n, self.J)) if v.ndim == 1 else v

    # -- subject views ---------------------------------------------------------
    def ice(self, i: int) -> IceRecord | None:
        if not np.isfinite(self.t_tilde[i]):
            return None
        return IceRecord(
            self.subject_ids[i],
            int(self.t_tilde[i]),
            self.ice_strategy[i] if self.ice_strategy[i] is not None else Strategy.MAR,
            bool(self.ice_hypothetical[i]),
        )

    def subject(self, i: int) -> Subject:
        return Subject(
            subject_id=self.subject_ids[i],
            group=self.group_labels[self.arm[i]],
            covariates={k: (v[i] if v.ndim == 1 else v[i].copy()) for k, v in self.covariates.items()},
            outcomes=self.outcomes[i].copy(),
            ice=self.ice(i),
        )

    @property
    def subjects(self) -> list[Subject]:
        return [self.subject(i) for i in range(self.n)]

    @classmethod
    def from_subjects(
        cls,
        grid: VisitGrid,
        subjects: Sequence[Subject],
        group_labels: tuple[str, str] = ("control", "intervention"),
    ) -> "TrialDataset":
        names = list(subjects[0].covariates) if subjects else []
        arm = []
        for s in subjects:
            if s.group not in group_labels:
                raise DatasetError(f"subject {s.subject_id}: unknown group {s.group!r}")
            arm.append(group_labels.index(s.group))
            if set(s.covariates) != set(names):
                raise DatasetError(f"subject {s.subject_id}: missing covariate")
        covs = {k: np.array([np.asarray(s.covariates[k], float) for s in subjects]) for k in names}
        return cls(
            grid=grid,
            subject_ids=[s.subject_id for s in subjects],
            arm=arm,
            outcomes=np.array([np.asarray(s.outcomes, float) for s in subjects]).reshape(len(subjects), grid.J),
            covariates=covs,
            t_tilde=[s.t_tilde for s in subjects],
            ice_strategy=[s.ice.strategy if s.ice else None for s in subjects],
            ice_hypothetical=[bool(s.ice and s.ice.hypothetical) for s in subjects],
            group_labels=group_labels,
        )

    # -- derived datasets ----------------------------------------------------
    def replace(self, **changes) -> "TrialDataset":
        fields = dict(
            grid=self.grid,
            subject_ids=self.subject_ids,
            arm=self.arm,
            outcomes=self.outcomes,
            covariates=self.covariates,
            t_tilde=self.t_tilde,
            ice_strategy=self.ice_strategy,
            ice_hypothetical=self.ice_hypothetical,
            group_labels=self.group_labels,
        )
        fields.update(changes)
        return TrialDataset(**fields)

    def take(self, index: Iterable[int]) -> "TrialDataset":
        """Subset/resample subjects; repeated subjects get ``#k`` id suffixes."""
        index = np.asarray(list(index), dtype=int)
        ids, seen = [], {}
        for i in index:
            sid = self.subject_ids[i]
            k = seen.get(sid, 0)
            seen[sid] = k + 1
            ids.append(sid if k == 0 else f"{sid}#{k}")
        return self.replace(
            subject_ids=ids,
            arm=self.arm[index],
            outcomes=self.outcomes[index],
            covariates={k: v[index] for k, v in self.covariates.items()},
            t_tilde=self.t_tilde[index],
            ice_strategy=[self.ice_strategy[i] for i in index],
            ice_hypothetical=self.ice_hypothetical[index],
        )

    def drop(self, i: int) -> "TrialDataset":
        return self.take(np.delete(np.arange(self.n), i))

    def with_strategy(self, strategy: Strategy | None) -> "TrialDataset":
        """Assign ``strategy`` to every ICE record (``None`` keeps the records)."""
        if strategy is None:
            return self
        return self.replace(ice_strategy=[strategy if np.isfinite(t) else None for t in self.t_tilde])

    def relabel_groups(self) -> "TrialDataset":
        """Swap which group is the reference."""
        return self.replace(arm=1 - self.arm, group_labels=self.group_labels[::-1])


def post_ice_mask(d: TrialDataset) -> np.ndarray:
    """(n, J) boolean: visit index strictly after the subject's t_tilde."""
    visit = np.arange(1, d.J + 1)
    return visit[None, :] > d.t_tilde[:, None]


def mask_for_imputation(d: TrialDataset, mask_mar: bool = False) -> TrialDataset:
    """Return Y' : outcomes after a reference-based ICE set to missing.

    With ``mask_mar`` the post-ICE outcomes of MAR-strategy ICEs are removed as
    well (used when post-ICE data should inform the analysis but not the
    imputation model).
    """
    targeted = np.array(
        [s is not None and (s.reference_based or mask_mar) for s in d.ice_strategy], dtype=bool
    )
    drop = post_ice_mask(d) & targeted[:, None]
    if not drop.any():
        return d
    y = d.outcomes.copy()
    y[drop] = np.nan
    return d.replace(outcomes=y)


def split_observed_missing(s: Subject | np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """1-based indices of observed and missing visits."""
    y = s.outcomes if isinstance(s, Subject) else np.asarray(s, float)
    miss = np.isnan(y)
    return tuple(int(j) + 1 for j in np.flatnonzero(~miss)), tuple(int(j) + 1 for j in np.flatnonzero(miss))


def validate(d: TrialDataset) -> list[str]:
    """List invariant violations; an empty list means the dataset is usable."""
    problems = []
    if d.n < 2:
        problems.append("need at least two subjects")
    for a, label in enumerate(d.group_labels):
        if not (d.arm == a).any():
            problems.append(f"group without subjects: {label}")
    if len(set(d.subject_ids)) != d.n:
        problems.append("duplicate subject ids")
    for name, v in d.covariates.items():
        bad = ~np.isfinite(v).reshape(d.n, -1).all(axis=1)
        for i in np.flatnonzero(bad):
            problems.append(f"subject {d.subject_ids[i]}: missing covariate {name}")
    post = post_ice_mask(d)
    for i in np.flatnonzero(d.has_ice):
        sid, tt, strat = d.subject_ids[i], d.t_tilde[i], d.ice_strategy[i]
        if tt != int(tt) or tt < 0:
            problems.append(f"subject {sid}: ICE visit index must be a non-negative integer")
        elif tt >= d.J:
            problems.append(f"subject {sid}: ICE after the final visit leaves nothing to impute")
        if strat is None:
            problems.append(f"subject {sid}: ICE without a strategy")
        if d.ice_hypothetical[i] and np.isfinite(d.outcomes[i][post[i]]).any():
            problems.append(f"subject {sid}: observed outcome after hypothetical-strategy ICE")
    return problems


# -- CSV ---------------------------------------------------------------------

REQUIRED_COLUMNS = ("subject_id", "group", "visit", "outcome")


def _parse_float(cell: str | None) -> float:
    if cell is None or cell in MISSING_TOKENS:
        return math.nan
    try:
        return float(cell)
    except ValueError:
        raise DatasetError(f"not a number: {cell!r}") from None


def load_csv(path: str | Path, schema: DataSchema) -> TrialDataset:
    """Read a long-format file (one row per subject-visit).

    Columns: ``subject_id, group, visit, outcome``, every covariate named in
    the schema, and optionally ``ice_visit``/``ice_strategy``/``ice_policy``
    (``ice_visit`` is the label of the last visit before the event;
    ``ice_policy`` is ``hypothetical`` or ``treatment-policy``).
    """
    grid = schema.grid
    J = grid.J
    rows_by_subject: dict[str, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing_cols = [c for c in (*REQUIRED_COLUMNS, *schema.covariates) if c not in header]
        if missing_cols:
            raise DatasetError(f"missing columns: {', '.join(missing_cols)}")
        for lineno, row in enumerate(reader, start=2):
            sid = row["subject_id"].strip()
            visit = row["visit"].strip()
            if grid.baseline_label is not None and visit == grid.baseline_label:
                continue
            j = grid.index(visit) - 1
            rec = rows_by_subject.setdefault(
                sid,
                {
                    "group": row["group"].strip(),
                    "y": np.full(J, np.nan),
                    "seen": np.zeros(J, bool),
                    "cov": {k: np.full(J, np.nan) for k in schema.covariates},
                    "ice": set(),
                },
            )
            if rec["group"] != row["group"].strip():
                raise DatasetError(f"line {lineno}: subject {sid} changes group")
            if rec["seen"][j]:
                raise DatasetError(f"line {lineno}: duplicate (subject, visit) = ({sid}, {visit})")
            rec["seen"][j] = True
            rec["y"][j] = _parse_float(row["outcome"])
            for k in schema.covariates:
                value = _parse_float(row[k])
                if math.isnan(value):
                    raise DatasetError(f"line {lineno}: missing covariate {k} for subject {sid}")
                rec["cov"][k][j] = value
            ice_visit = (row.get("ice_visit") or "").strip()
            ice_strategy = (row.get("ice_strategy") or "").strip()
            ice_policy = (row.get("ice_policy") or "").strip()
            if ice_visit in MISSING_TOKENS and ice_strategy in MISSING_TOKENS:
                continue
            if ice_visit in MISSING_TOKENS or ice_strategy in MISSING_TOKENS:
                raise DatasetError(f"line {lineno}: ice_visit and ice_strategy must be given together")
            if ice_policy not in ("", "hypothetical", "treatment-policy"):
                raise DatasetError(f"line {lineno}: unknown ice_policy {ice_policy!r}")
            tt = 0 if ice_visit == grid.baseline_label else grid.index(ice_visit)
            rec["ice"].add((tt, Strategy.parse(ice_strategy), ice_policy == "hypothetical"))

    groups = sorted({r["group"] for r in rows_by_subject.values()})
    others = [g for g in groups if g != schema.reference_group]
    if len(others) > 1:
        raise DatasetError(f"expected two groups, found {groups}")
    intervention = others[0] if others else "intervention"

    ids, arm, ys, tts, strats, hyps = [], [], [], [], [], []
    covs = {k: [] for k in schema.covariates}
    for sid, rec in rows_by_subject.items():
        ids.append(sid)
        arm.append(0 if rec["group"] == schema.reference_group else 1)
        ys.append(rec["y"])
        for k, kind in schema.covariates.items():
            v = rec["cov"][k]
            seen = rec["seen"]
            if kind == "baseline":
                vals = v[seen]
                if not np.all(vals == vals[0]):
                    raise DatasetError(f"subject {sid}: baseline covariate {k} varies across visits")
                covs[k].append(vals[0])
            else:
                if not seen.all():
                    raise DatasetError(f"subject {sid}: missing covariate {k} (time-varying, absent visit row)")
                covs[k].append(v)
        if len(rec["ice"]) > 1:
            raise DatasetError(f"subject {sid}: conflicting ICE records")
        if rec["ice"]:
            (tt, strat, hyp), = rec["ice"]
        else:
            tt, strat, hyp = math.inf, None, False
        tts.append(tt)
        strats.append(strat)
        hyps.append(hyp)

    d = TrialDataset(
        grid=grid,
        subject_ids=ids,
        arm=np.array(arm, dtype=np.int8).reshape(-1),
        outcomes=np.array(ys).reshape(len(ids), J),
        covariates={k: np.array(v) for k, v in covs.items()},
        t_tilde=tts,
        ice_strategy=strats,
        ice_hypothetical=hyps,
        group_labels=(schema.reference_group, intervention),
    )
    problems = validate(d)
    if problems:
        raise DatasetError("; ".join(problems))
    return d


def write_csv(
    path: str | Path,
    d: TrialDataset,
    outcomes: np.ndarray | None = None,
    provenance: np.ndarray | None = None,
) -> None:
    """Write ``d`` in the long format read by :func:`load_csv`.

    ``outcomes``/``provenance`` override the outcome column and add a
    ``provenance`` column (``observed``/``imputed``) for completed data.
    """
    y = d.outcomes if outcomes is None else outcomes
    names = list(d.covariates)
    header = ["subject_id", "group", "visit", "outcome", *names, "ice_visit", "ice_strategy", "ice_policy"]
    if provenance is not None:
        header.append("provenance")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(d.n):
            ice = d.ice(i)
            for j, label in enumerate(d.grid.labels):
                row = [
                    d.subject_ids[i],
                    d.group_labels[d.arm[i]],
                    label,
                    "NA" if np.isnan(y[i, j]) else repr(float(y[i, j])),
                    *(repr(float(d.covariate_matrix(k)[i, j])) for k in names),
                    "" if ice is None else (d.grid.labels[ice.t_tilde - 1] if ice.t_tilde else d.grid.baseline_label),
                    ice.strategy.value if ice else "",
                    ("hypothetical" if ice.hypothetical else "treatment-policy") if ice else "",
                ]
                if provenance is not None:
                    row.append("imputed" if provenance[i, j] else "observed")
                w.writerow(row)
