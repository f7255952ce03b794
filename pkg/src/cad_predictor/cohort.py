"""Cohort data model, CSV ingestion and seeded 3:1 train/test splitting.

A cohort is one row per participant: a binary outcome (1 = CAD present),
named clinical covariates and named metabolite columns. Missing cells are
tracked by an explicit mask; the matching entries of ``values`` hold NaN
and are never read by computation.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator

from cad_predictor.core.exceptions import (
    DataValidationError,
    MissingColumnError,
    MissingOutcomeError,
    NonBinaryOutcomeError,
    TooFewRowsError,
    UnparseableCellError,
)
from cad_predictor.core.rng import SPLIT_STREAM, make_rng

logger = logging.getLogger(__name__)

MISSING_TOKENS = frozenset({"", "NA"})
MIN_SPLIT_ROWS = 8
SPLIT_RATIO = (3, 1)


class CohortSchema(BaseModel):
    """Names of the outcome, identifier, covariate and metabolite columns."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    outcome_name: str
    covariate_names: Tuple[str, ...] = ()
    metabolite_names: Tuple[str, ...]
    id_name: Optional[str] = None

    @model_validator(mode="after")
    def _check_names(self) -> "CohortSchema":
        if not self.metabolite_names:
            raise ValueError("metabolite_names must not be empty")
        features = list(self.covariate_names) + list(self.metabolite_names)
        if self.outcome_name in features:
            raise ValueError(f"outcome {self.outcome_name!r} is also listed as a feature")
        names = features + [self.outcome_name] + ([self.id_name] if self.id_name else [])
        duplicates = sorted({name for name in names if names.count(name) > 1})
        if duplicates:
            raise ValueError(f"duplicate column names: {duplicates}")
        return self

    @property
    def feature_names(self) -> Tuple[str, ...]:
        return tuple(self.covariate_names) + tuple(self.metabolite_names)


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class CohortTable:
    """An immutable n x p feature matrix with missingness mask and binary outcome.

    Feature columns are ordered as ``schema.feature_names`` (covariates first).
    """

    values: np.ndarray
    missing: np.ndarray
    outcome: np.ndarray
    schema: CohortSchema
    ids: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64, copy=True)
        missing = np.array(self.missing, dtype=bool, copy=True)
        outcome = np.asarray(self.outcome)
        n_features = len(self.schema.feature_names)

        if values.ndim != 2 or values.shape[1] != n_features:
            raise DataValidationError(
                f"values must be n x {n_features}, got shape {values.shape}",
                error_code="SHAPE_MISMATCH",
                context={"shape": list(values.shape), "n_features": n_features},
            )
        if missing.shape != values.shape:
            raise DataValidationError("missing mask shape differs from values", error_code="SHAPE_MISMATCH")
        if outcome.shape != (values.shape[0],):
            raise DataValidationError("outcome length differs from row count", error_code="SHAPE_MISMATCH")

        bad_outcome = np.flatnonzero((outcome != 0) & (outcome != 1))
        if bad_outcome.size:
            raise NonBinaryOutcomeError(int(bad_outcome[0]) + 1, str(outcome[bad_outcome[0]]))
        values[missing] = np.nan
        if not np.isfinite(values[~missing]).all():
            raise DataValidationError(
                "observed cells must be finite numbers", error_code="NON_FINITE_VALUE"
            )

        ids = None
        if self.ids is not None:
            ids = np.asarray(self.ids, dtype=object).copy()
            if ids.shape != (values.shape[0],):
                raise DataValidationError("ids length differs from row count", error_code="SHAPE_MISMATCH")
            ids = _readonly(ids)

        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "missing", _readonly(missing))
        object.__setattr__(self, "outcome", _readonly(outcome.astype(np.int8)))
        object.__setattr__(self, "ids", ids)

    @property
    def n_rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def feature_names(self) -> Tuple[str, ...]:
        return self.schema.feature_names

    @property
    def covariate_indices(self) -> np.ndarray:
        return np.arange(len(self.schema.covariate_names))

    @property
    def metabolite_indices(self) -> np.ndarray:
        start = len(self.schema.covariate_names)
        return np.arange(start, start + len(self.schema.metabolite_names))

    @property
    def covariates(self) -> np.ndarray:
        return self.values[:, self.covariate_indices]

    @property
    def metabolites(self) -> np.ndarray:
        return self.values[:, self.metabolite_indices]

    @property
    def has_missing(self) -> bool:
        return bool(self.missing.any())

    def missing_counts(self) -> np.ndarray:
        return self.missing.sum(axis=0)

    def column_index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise MissingColumnError(name)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.column_index(name)]

    def features(self, adjusted: bool) -> np.ndarray:
        """Metabolite block, with the covariates appended when ``adjusted``."""
        if adjusted:
            return np.hstack([self.metabolites, self.covariates])
        return self.metabolites

    def subset(self, rows: Sequence[int]) -> "CohortTable":
        rows = np.asarray(rows, dtype=np.intp)
        return CohortTable(
            values=self.values[rows],
            missing=self.missing[rows],
            outcome=self.outcome[rows],
            schema=self.schema,
            ids=None if self.ids is None else self.ids[rows],
        )

    def completed(self, values: np.ndarray) -> "CohortTable":
        """Return a copy with every cell observed and set from ``values``."""
        return CohortTable(
            values=values,
            missing=np.zeros(self.values.shape, dtype=bool),
            outcome=self.outcome,
            schema=self.schema,
            ids=self.ids,
        )


def _is_missing(text: str) -> bool:
    return text.strip() in MISSING_TOKENS


def _parse_cell(text: str, row: int, col: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise UnparseableCellError(row, col, text)
    if not math.isfinite(value):
        raise UnparseableCellError(row, col, text)
    return value


def load_csv(path: Union[str, Path], schema: CohortSchema) -> CohortTable:
    """Read a cohort CSV file.

    Empty cells and the literal ``NA`` (case-sensitive) are missing. Row
    numbers in errors count data rows from 1 (the header is row 0).

    Raises:
        MissingColumnError, UnparseableCellError, MissingOutcomeError,
        NonBinaryOutcomeError, DataValidationError
    """
    path = Path(path)
    if not path.exists():
        raise DataValidationError(
            f"Cohort file not found: {path}", error_code="FILE_NOT_FOUND", context={"path": str(path)}
        )
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise DataValidationError(f"Cohort file has no header: {path}", error_code="MISSING_HEADER")
    frame.columns = [str(column).strip() for column in frame.columns]

    required = [schema.outcome_name, *schema.feature_names]
    if schema.id_name:
        required.insert(0, schema.id_name)
    for name in required:
        if name not in frame.columns:
            raise MissingColumnError(name)

    n_rows = len(frame)
    outcome = np.empty(n_rows, dtype=np.int8)
    for i, text in enumerate(frame[schema.outcome_name].tolist()):
        if _is_missing(text):
            raise MissingOutcomeError(i + 1)
        try:
            value = float(text)
        except ValueError:
            raise NonBinaryOutcomeError(i + 1, text)
        if value not in (0.0, 1.0):
            raise NonBinaryOutcomeError(i + 1, text)
        outcome[i] = int(value)

    features = schema.feature_names
    values = np.full((n_rows, len(features)), np.nan)
    missing = np.zeros((n_rows, len(features)), dtype=bool)
    for j, name in enumerate(features):
        for i, text in enumerate(frame[name].tolist()):
            if _is_missing(text):
                missing[i, j] = True
            else:
                values[i, j] = _parse_cell(text.strip(), i + 1, name)

    ids = frame[schema.id_name].to_numpy(dtype=object) if schema.id_name else None
    logger.info("Loaded %d rows x %d features from %s (%d missing cells)", n_rows, len(features), path, missing.sum())
    return CohortTable(values=values, missing=missing, outcome=outcome, schema=schema, ids=ids)


def write_csv(table: CohortTable, path: Union[str, Path]) -> None:
    """Write ``table`` so that :func:`load_csv` reproduces it exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns: Dict[str, List[str]] = {}
    if table.schema.id_name:
        ids = table.ids if table.ids is not None else np.arange(1, table.n_rows + 1)
        columns[table.schema.id_name] = [str(value) for value in ids]
    columns[table.schema.outcome_name] = [str(int(value)) for value in table.outcome]
    for j, name in enumerate(table.feature_names):
        columns[name] = [
            "NA" if table.missing[i, j] else repr(float(table.values[i, j])) for i in range(table.n_rows)
        ]
    pd.DataFrame(columns).to_csv(path, index=False)


@dataclass(frozen=True)
class SplitIndices:
    """Disjoint, exhaustive train/test row indices (sorted ascending)."""

    train: Tuple[int, ...]
    test: Tuple[int, ...]
    seed: int
    ratio: Tuple[int, int] = SPLIT_RATIO
    stratified: bool = False

    @property
    def n_rows(self) -> int:
        return len(self.train) + len(self.test)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "ratio": list(self.ratio),
            "stratified": self.stratified,
            "train": list(self.train),
            "test": list(self.test),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SplitIndices":
        return cls(
            train=tuple(int(i) for i in data["train"]),
            test=tuple(int(i) for i in data["test"]),
            seed=int(data["seed"]),
            ratio=(int(data["ratio"][0]), int(data["ratio"][1])),
            stratified=bool(data.get("stratified", False)),
        )

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SplitIndices":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _stratified_test_rows(outcome: np.ndarray, n_test: int, rng: np.random.Generator) -> np.ndarray:
    n = outcome.size
    classes = [np.flatnonzero(outcome == c) for c in (0, 1)]
    exact = [n_test * idx.size / n for idx in classes]
    quota = [int(math.floor(q)) for q in exact]
    # Largest remainder; ties go to class 0.
    for c in sorted((0, 1), key=lambda c: (-(exact[c] - quota[c]), c))[: n_test - sum(quota)]:
        quota[c] += 1
    picked = [rng.permutation(idx)[: quota[c]] for c, idx in enumerate(classes)]
    return np.concatenate(picked)


def train_test_split(table: CohortTable, seed: int, stratified: bool = False) -> SplitIndices:
    """Split rows 3:1 into train and test with ``|test| = floor(n / 4)``.

    Raises:
        TooFewRowsError: If the table has fewer than 8 rows.
    """
    n = table.n_rows
    if n < MIN_SPLIT_ROWS:
        raise TooFewRowsError(n, MIN_SPLIT_ROWS)
    n_test = n // 4
    rng = make_rng(seed, SPLIT_STREAM)
    if stratified:
        test = _stratified_test_rows(np.asarray(table.outcome), n_test, rng)
    else:
        test = rng.permutation(n)[:n_test]
    in_test = np.zeros(n, dtype=bool)
    in_test[test] = True
    return SplitIndices(
        train=tuple(int(i) for i in np.flatnonzero(~in_test)),
        test=tuple(int(i) for i in np.flatnonzero(in_test)),
        seed=int(seed),
        stratified=stratified,
    )


@dataclass(frozen=True)
class SummaryRow:
    name: str
    kind: str  # "continuous", "binary" or "missing_only"
    n_observed: int
    mean: Optional[float] = None
    sd: Optional[float] = None
    count: Optional[int] = None
    percent: Optional[float] = None

    def describe(self) -> str:
        if self.kind == "continuous":
            return f"{self.mean:.1f} ± {self.sd:.1f}"
        if self.kind == "binary":
            return f"{self.count} ({self.percent:.0f}%)"
        return "missing (0 observed)"


@dataclass(frozen=True)
class CohortSummary:
    """Table-1-style description of a cohort."""

    n_rows: int
    rows: Tuple[SummaryRow, ...] = field(default_factory=tuple)

    def row(self, name: str) -> SummaryRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.__dict__ for row in self.rows])

    def format(self) -> str:
        width = max(len(row.name) for row in self.rows) if self.rows else 0
        lines = [f"{'n':<{width}}  {self.n_rows}"]
        lines.extend(f"{row.name:<{width}}  {row.describe()}" for row in self.rows)
        return "\n".join(lines)


def _summarize_column(name: str, column: np.ndarray) -> SummaryRow:
    observed = column[np.isfinite(column)]
    if observed.size == 0:
        return SummaryRow(name=name, kind="missing_only", n_observed=0, count=0)
    if np.isin(observed, (0.0, 1.0)).all():
        count = int(observed.sum())
        return SummaryRow(
            name=name, kind="binary", n_observed=int(observed.size), count=count, percent=100.0 * count / observed.size
        )
    sd = float(np.std(observed, ddof=1)) if observed.size > 1 else 0.0
    return SummaryRow(name=name, kind="continuous", n_observed=int(observed.size), mean=float(observed.mean()), sd=sd)


def summarize(table: CohortTable, outcome_label: str = "CAD present") -> CohortSummary:
    """Per-column mean/SD for continuous and count/percent for 0/1 columns.

    Percentages are over non-missing entries.
    """
    rows = [_summarize_column(outcome_label, table.outcome.astype(np.float64))]
    rows.extend(_summarize_column(name, table.values[:, j]) for j, name in enumerate(table.feature_names))
    return CohortSummary(n_rows=table.n_rows, rows=tuple(rows))
