"""RCT data model, CSV ingestion and stratified splitting.

Every other module consumes :class:`RCTDataset`. Treatment labels are
integers in ``{0, ..., K}`` with ``0`` the control arm; costs are an
``N x K`` matrix of strictly positive values (control is free and not
stored).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class SchemaError(ValueError):
    """A required column is missing or the column roles are inconsistent."""


class ParseError(ValueError):
    """A cell could not be parsed as a number."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class ValidationError(ValueError):
    """The data violates an RCTDataset invariant."""

    def __init__(self, message, rows=None):
        super().__init__(message)
        self.rows = list(rows) if rows is not None else []


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _offending(mask, ids):
    bad = np.flatnonzero(mask)[:10]
    return [ids[i] for i in bad]


@dataclass(frozen=True, eq=False)
class RCTDataset:
    """Immutable randomized-trial sample ``(X, T, Y, C)``.

    Parameters
    ----------
    features : array of shape (n_samples, n_features)
    treatment : int array of shape (n_samples,)
        Values in ``0..num_treatments``; ``0`` is control.
    outcome : array of shape (n_samples,)
    cost : array of shape (n_samples, num_treatments)
        ``cost[i, j - 1]`` is the cost of giving treatment ``j`` to user ``i``.
    num_treatments : int
    feature_names : sequence of str, optional
    ids : array of shape (n_samples,), optional
        Row identifiers; defaults to ``0..n_samples-1``.
    """

    features: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    cost: np.ndarray
    num_treatments: int
    feature_names: tuple = ()
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if X.size else X.reshape(0, 0)
        n = X.shape[0]
        K = int(self.num_treatments)
        ids = np.arange(n) if self.ids is None else np.asarray(self.ids)
        names = tuple(self.feature_names) or tuple(f"x{j + 1}" for j in range(X.shape[1] if X.ndim == 2 else 0))
        cost = np.asarray(self.cost, dtype=float)
        if cost.ndim == 1 and cost.size == K:
            cost = np.broadcast_to(cost, (n, K))
        object.__setattr__(self, "features", _frozen(X, float))
        object.__setattr__(self, "outcome", _frozen(self.outcome, float))
        object.__setattr__(self, "cost", _frozen(cost, float))
        object.__setattr__(self, "num_treatments", K)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "ids", _frozen(ids, ids.dtype))
        t = np.asarray(self.treatment)
        if t.size and not np.all(np.isfinite(t.astype(float))):
            raise ValidationError("treatment labels must be finite integers")
        if t.size and np.any(t.astype(float) != np.round(t.astype(float))):
            raise ValidationError("treatment labels must be integers")
        object.__setattr__(self, "treatment", _frozen(t, np.int64))
        self._validate()

    def _validate(self):
        X, t, y, c, K = self.features, self.treatment, self.outcome, self.cost, self.num_treatments
        n = X.shape[0]
        ids = list(self.ids)
        if K < 1:
            raise ValidationError(f"num_treatments must be >= 1, got {K}")
        if n < K + 1:
            raise ValidationError(f"need at least K+1={K + 1} rows, got {n}")
        if t.shape != (n,) or y.shape != (n,):
            raise ValidationError("treatment and outcome must have one entry per row")
        if c.shape != (n, K):
            raise ValidationError(f"cost must have shape ({n}, {K}), got {c.shape}")
        if len(self.feature_names) != X.shape[1]:
            raise ValidationError("feature_names length does not match the feature matrix")
        if len(ids) != n:
            raise ValidationError("ids length does not match the number of rows")

        bad = (t < 0) | (t > K)
        if bad.any():
            rows = _offending(bad, ids)
            raise ValidationError(f"treatment label outside 0..{K} in rows {rows}", rows)
        bad = ~np.isfinite(X).all(axis=1) | ~np.isfinite(y) | ~np.isfinite(c).all(axis=1)
        if bad.any():
            rows = _offending(bad, ids)
            raise ValidationError(f"non-finite values in rows {rows}", rows)
        bad = ~(c > 0).all(axis=1)
        if bad.any():
            rows = _offending(bad, ids)
            raise ValidationError(f"costs must be strictly positive; offending rows {rows}", rows)
        counts = np.bincount(t, minlength=K + 1)
        empty = [j for j in range(K + 1) if counts[j] == 0]
        if empty:
            raise ValidationError(f"no samples in treatment arm(s) {empty}")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def arm_counts(self) -> np.ndarray:
        return np.bincount(self.treatment, minlength=self.num_treatments + 1)

    def subset(self, rows) -> "RCTDataset":
        rows = np.asarray(rows)
        return RCTDataset(
            features=self.features[rows],
            treatment=self.treatment[rows],
            outcome=self.outcome[rows],
            cost=self.cost[rows],
            num_treatments=self.num_treatments,
            feature_names=self.feature_names,
            ids=self.ids[rows],
        )


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Potential outcomes for synthetic data; column ``j`` holds ``Y_i(j)``."""

    potential_outcomes: np.ndarray
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        po = np.asarray(self.potential_outcomes, dtype=float)
        if po.ndim != 2 or po.shape[1] < 2:
            raise ValidationError("potential_outcomes must be an (N, K+1) matrix with K >= 1")
        ids = np.arange(po.shape[0]) if self.ids is None else np.asarray(self.ids)
        object.__setattr__(self, "potential_outcomes", _frozen(po, float))
        object.__setattr__(self, "ids", _frozen(ids, ids.dtype))

    @property
    def num_treatments(self) -> int:
        return self.potential_outcomes.shape[1] - 1

    def effects(self) -> np.ndarray:
        """True individual effects ``Y_i(j) - Y_i(0)``, shape (N, K)."""
        po = self.potential_outcomes
        return po[:, 1:] - po[:, :1]

    def check_matches(self, data: RCTDataset) -> None:
        if self.potential_outcomes.shape != (data.n_samples, data.num_treatments + 1):
            raise ValidationError(
                f"ground truth shape {self.potential_outcomes.shape} does not match "
                f"dataset ({data.n_samples}, {data.num_treatments + 1})"
            )

    def subset(self, rows) -> "GroundTruth":
        rows = np.asarray(rows)
        return GroundTruth(self.potential_outcomes[rows], self.ids[rows])


@dataclass
class ColumnSchema:
    """Column roles for :func:`load_rct_csv`.

    Columns not named here (and not the id column) are features. When
    ``cost_cols`` is None, columns named ``cost_1..cost_K`` are picked up
    automatically; if there are none, ``cost_levels`` is broadcast to all
    users.
    """

    treatment_col: str = "treatment"
    outcome_col: str = "outcome"
    id_col: Optional[str] = "id"
    cost_cols: Optional[Sequence[str]] = None
    cost_levels: Optional[Sequence[float]] = None
    feature_cols: Optional[Sequence[str]] = None
    num_treatments: Optional[int] = None
    exclude_cols: Sequence[str] = field(default_factory=tuple)


def _parse_float(text, row, col):
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"row {row}: column {col!r} has non-numeric value {text!r}", row, col) from None


def _auto_cost_cols(header):
    cols = []
    j = 1
    while f"cost_{j}" in header:
        cols.append(f"cost_{j}")
        j += 1
    return cols


def load_rct_csv(path, schema: Optional[ColumnSchema] = None) -> RCTDataset:
    """Read and validate an RCT dataset from a comma-separated UTF-8 file.

    Raises
    ------
    SchemaError
        A named column is missing or no cost information is available.
    ParseError
        A cell is not numeric; ``row`` is the zero-based data row index.
    ValidationError
        The parsed data violates an :class:`RCTDataset` invariant.
    """
    schema = schema or ColumnSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise ValidationError("empty file: no header and no rows (need N >= K+1)")
    header, body = rows[0], rows[1:]
    for i, r in enumerate(body):
        if len(r) != len(header):
            raise ParseError(f"row {i}: expected {len(header)} cells, found {len(r)}", i)

    index = {name: k for k, name in enumerate(header)}
    for role, col in (("treatment", schema.treatment_col), ("outcome", schema.outcome_col)):
        if col not in index:
            raise SchemaError(f"missing {role} column {col!r}")
    id_col = schema.id_col if schema.id_col in index else None

    cost_cols = list(schema.cost_cols) if schema.cost_cols is not None else _auto_cost_cols(index)
    for col in cost_cols:
        if col not in index:
            raise SchemaError(f"missing cost column {col!r}")
    if cost_cols:
        K = len(cost_cols)
    elif schema.cost_levels is not None:
        K = len(schema.cost_levels)
    else:
        raise SchemaError("no cost columns found and no cost_levels given")
    if schema.num_treatments is not None and schema.num_treatments != K:
        raise SchemaError(f"num_treatments={schema.num_treatments} but {K} cost entries supplied")

    reserved = {schema.treatment_col, schema.outcome_col, *cost_cols, *schema.exclude_cols}
    if id_col:
        reserved.add(id_col)
    if schema.feature_cols is not None:
        feature_cols = list(schema.feature_cols)
        for col in feature_cols:
            if col not in index:
                raise SchemaError(f"missing feature column {col!r}")
    else:
        feature_cols = [h for h in header if h not in reserved]

    n = len(body)
    X = np.empty((n, len(feature_cols)))
    y = np.empty(n)
    t = np.empty(n)
    C = np.empty((n, K))
    ids = []
    for i, r in enumerate(body):
        for k, col in enumerate(feature_cols):
            X[i, k] = _parse_float(r[index[col]], i, col)
        t[i] = _parse_float(r[index[schema.treatment_col]], i, schema.treatment_col)
        y[i] = _parse_float(r[index[schema.outcome_col]], i, schema.outcome_col)
        for k, col in enumerate(cost_cols):
            C[i, k] = _parse_float(r[index[col]], i, col)
        ids.append(r[index[id_col]] if id_col else i)
    if not cost_cols:
        C[:] = np.asarray(schema.cost_levels, dtype=float)

    if id_col:
        try:
            ids = np.array([int(v) for v in ids])
        except ValueError:
            ids = np.array(ids, dtype=object)
    else:
        ids = np.arange(n)

    if np.any(~np.isfinite(t)) or np.any(t != np.round(t)):
        bad = _offending(~np.isfinite(t) | (t != np.round(t)), list(ids))
        raise ValidationError(f"treatment labels must be integers; offending rows {bad}", bad)
    return RCTDataset(
        features=X,
        treatment=t.astype(np.int64),
        outcome=y,
        cost=C,
        num_treatments=K,
        feature_names=tuple(feature_cols),
        ids=ids,
    )


def format_float(v) -> str:
    """Shortest decimal string that parses back to the same double."""
    v = float(v)
    if math.isfinite(v) and v == int(v) and abs(v) < 1e16:
        return str(int(v)) if v != 0 or math.copysign(1, v) > 0 else "-0.0"
    return repr(v)


def write_rct_csv(data: RCTDataset, path) -> Path:
    """Write ``data`` as ``id,<features>,treatment,outcome,cost_1..cost_K``."""
    path = Path(path)
    K = data.num_treatments
    header = ["id", *data.feature_names, "treatment", "outcome", *[f"cost_{j}" for j in range(1, K + 1)]]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n_samples):
            w.writerow(
                [
                    data.ids[i],
                    *map(format_float, data.features[i]),
                    int(data.treatment[i]),
                    format_float(data.outcome[i]),
                    *map(format_float, data.cost[i]),
                ]
            )
    return path


def write_truth_csv(truth: GroundTruth, path) -> Path:
    """Write potential outcomes as ``id,y_0..y_K``."""
    path = Path(path)
    K = truth.num_treatments
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *[f"y_{j}" for j in range(K + 1)]])
        for i in range(truth.potential_outcomes.shape[0]):
            w.writerow([truth.ids[i], *map(format_float, truth.potential_outcomes[i])])
    return path


def load_truth_csv(path) -> GroundTruth:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ValidationError("empty ground-truth file")
    header, body = rows[0], rows[1:]
    cols = [k for k, h in enumerate(header) if h.startswith("y_")]
    if len(cols) < 2:
        raise SchemaError("ground-truth file needs columns y_0..y_K")
    po = np.array([[_parse_float(r[k], i, header[k]) for k in cols] for i, r in enumerate(body)])
    ids = _read_ids(header, body) if "id" in header else None
    return GroundTruth(po.reshape(len(body), len(cols)), ids)


def split_train_test(data: RCTDataset, test_fraction: float, seed: int):
    """Stratified random split by treatment arm.

    Each arm is shuffled with a generator seeded by ``seed`` and
    ``round(test_fraction * n_arm)`` of its rows go to the test set.
    Row order within each split follows the input order.

    Returns
    -------
    (train, test) : tuple of RCTDataset
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    test_mask = np.zeros(data.n_samples, dtype=bool)
    for arm in range(data.num_treatments + 1):
        rows = np.flatnonzero(data.treatment == arm)
        n_test = int(round(test_fraction * rows.size))
        if n_test == 0 or n_test == rows.size:
            raise ValidationError(
                f"treatment arm {arm} has {rows.size} sample(s); too small to stratify at "
                f"test_fraction={test_fraction}"
            )
        test_mask[rng.permutation(rows)[:n_test]] = True
    return data.subset(np.flatnonzero(~test_mask)), data.subset(np.flatnonzero(test_mask))


def _read_ids(header, body):
    k = header.index("id")
    try:
        return np.array([int(r[k]) for r in body])
    except ValueError:
        return np.array([r[k] for r in body], dtype=object)


def read_problem_csv(path):
    """Read an allocation problem stored as ``id,theta_1..theta_K,cost_1..cost_K``.

    Returns ``(ids, theta, cost)``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise ValidationError(f"{path}: no data rows")
    header, body = rows[0], rows[1:]
    theta_cols = [h for h in header if h.startswith("theta_")]
    K = len(theta_cols)
    expected = [f"theta_{j}" for j in range(1, K + 1)] + [f"cost_{j}" for j in range(1, K + 1)]
    missing = [c for c in expected + ["id"] if c not in header]
    if K == 0 or missing:
        raise SchemaError(f"{path}: problem file needs id, theta_1..theta_K, cost_1..cost_K (missing {missing or 'theta_1'})")
    idx = [header.index(c) for c in expected]
    values = np.array([[_parse_float(r[k], i, header[k]) for k in idx] for i, r in enumerate(body)])
    return _read_ids(header, body), values[:, :K], values[:, K:]


def write_problem_csv(path, ids, theta, cost) -> Path:
    path = Path(path)
    theta, cost = np.asarray(theta, dtype=float), np.asarray(cost, dtype=float)
    K = theta.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *[f"theta_{j}" for j in range(1, K + 1)], *[f"cost_{j}" for j in range(1, K + 1)]])
        for i in range(theta.shape[0]):
            w.writerow([ids[i], *map(format_float, theta[i]), *map(format_float, cost[i])])
    return path


def write_assignment_csv(path, ids, chosen, margin=None) -> Path:
    """Write ``id,chosen_treatment,margin`` (margin is 0 for control rows)."""
    path = Path(path)
    chosen = np.asarray(chosen, dtype=np.int64)
    margin = np.zeros(chosen.size) if margin is None else np.asarray(margin, dtype=float)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "chosen_treatment", "margin"])
        for i in range(chosen.size):
            w.writerow([ids[i], int(chosen[i]), format_float(margin[i])])
    return path
