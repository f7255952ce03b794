"""log+1 transformation, z-standardization and principal component factors."""

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from cad_predictor.core.exceptions import (
    ConstantColumnError,
    DegenerateMatrixError,
    DimensionMismatchError,
    DomainError,
    TransformError,
)

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.95


def log1p_matrix(values: np.ndarray) -> np.ndarray:
    """Map every entry x to ln(1 + x).

    Raises:
        DomainError: If any entry is <= -1.
    """
    values = np.asarray(values, dtype=np.float64)
    bad = values <= -1.0
    if bad.any():
        index = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DomainError(
            f"log1p undefined for entry {values[index]!r} at {index}",
            context={"index": list(index), "value": float(values[index])},
        )
    return np.log1p(values)


@dataclass(frozen=True)
class Standardizer:
    """Column means and sample standard deviations (n - 1 denominator)."""

    means: np.ndarray
    sds: np.ndarray
    column_names: Tuple[str, ...] = ()

    @property
    def n_columns(self) -> int:
        return int(self.means.size)

    def apply(self, matrix: np.ndarray) -> np.ndarray:
        return apply_standardizer(self, matrix)

    def to_dict(self) -> Dict[str, Any]:
        return {"means": self.means.tolist(), "sds": self.sds.tolist(), "column_names": list(self.column_names)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Standardizer":
        return cls(
            means=np.asarray(data["means"], dtype=np.float64),
            sds=np.asarray(data["sds"], dtype=np.float64),
            column_names=tuple(data.get("column_names", ())),
        )


def fit_standardizer(
    values: np.ndarray, column_names: Optional[Sequence[str]] = None, strict: bool = True
) -> Standardizer:
    """Fit per-column means and sample SDs.

    Args:
        values: Complete n x p matrix, n >= 2.
        column_names: Optional names used in errors and reports.
        strict: When False, constant columns get SD 1 instead of an error
            (they stay constant at zero after centering).

    Raises:
        ConstantColumnError: If ``strict`` and a column has zero variance.
        TransformError: If there are fewer than two rows or missing entries.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 2:
        raise TransformError("Standardizer needs an n x p matrix with n >= 2", error_code="TOO_FEW_ROWS")
    if not np.isfinite(values).all():
        raise TransformError("Standardizer input has missing or non-finite entries", error_code="MISSING_VALUES")
    names = tuple(column_names) if column_names is not None else tuple(f"x{j}" for j in range(values.shape[1]))

    means = values.mean(axis=0)
    sds = values.std(axis=0, ddof=1)
    constant = np.flatnonzero(sds <= 1e-12 * np.maximum(1.0, np.abs(means)))
    if constant.size:
        if strict:
            raise ConstantColumnError(names[constant[0]])
        sds = sds.copy()
        sds[constant] = 1.0
    return Standardizer(means=means, sds=sds, column_names=names)


def apply_standardizer(standardizer: Standardizer, matrix: np.ndarray) -> np.ndarray:
    """Center and scale ``matrix`` with previously fitted statistics."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != standardizer.n_columns:
        raise DimensionMismatchError(standardizer.n_columns, matrix.shape[-1] if matrix.ndim else 0)
    return (matrix - standardizer.means) / standardizer.sds


@dataclass(frozen=True)
class PcaBasis:
    """Principal axes of a standardized matrix.

    ``loadings`` holds all p orthonormal axes as columns; the first
    ``k_selected`` are the factors used downstream.
    """

    loadings: np.ndarray
    explained_fraction: np.ndarray
    center: np.ndarray
    k_selected: int
    standardizer: Optional[Standardizer] = None

    @property
    def n_columns(self) -> int:
        return int(self.loadings.shape[0])

    def with_selection(self, k: int) -> "PcaBasis":
        if not 1 <= k <= self.loadings.shape[1]:
            raise TransformError(f"k must be in [1, {self.loadings.shape[1]}], got {k}", error_code="INVALID_K")
        return replace(self, k_selected=int(k))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "k_selected": self.k_selected,
            "explained_fraction": self.explained_fraction.tolist(),
            "center": self.center.tolist(),
            "loadings": self.loadings.tolist(),
            "standardizer": None if self.standardizer is None else self.standardizer.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PcaBasis":
        standardizer = data.get("standardizer")
        return cls(
            loadings=np.asarray(data["loadings"], dtype=np.float64),
            explained_fraction=np.asarray(data["explained_fraction"], dtype=np.float64),
            center=np.asarray(data["center"], dtype=np.float64),
            k_selected=int(data["k_selected"]),
            standardizer=None if standardizer is None else Standardizer.from_dict(standardizer),
        )

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PcaBasis":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def select_components(basis: Union[PcaBasis, Sequence[float], np.ndarray], threshold: float = DEFAULT_THRESHOLD) -> int:
    """Smallest k whose cumulative explained fraction exceeds ``threshold``.

    When no prefix exceeds it (threshold 1.0 with rounding), returns the
    number of components needed to reach the full cumulative total.
    """
    if not 0.0 < threshold <= 1.0:
        raise TransformError(f"threshold must be in (0, 1], got {threshold}", error_code="INVALID_THRESHOLD")
    fractions = basis.explained_fraction if isinstance(basis, PcaBasis) else np.asarray(basis, dtype=np.float64)
    cumulative = np.cumsum(fractions)
    above = np.flatnonzero(cumulative > threshold)
    if above.size:
        return int(above[0]) + 1
    return int(np.flatnonzero(cumulative >= cumulative[-1] - 1e-12)[0]) + 1


def pca_fit(
    standardized: np.ndarray, standardizer: Optional[Standardizer] = None, threshold: float = DEFAULT_THRESHOLD
) -> PcaBasis:
    """Right singular vectors of the centered matrix, largest variance first.

    Each axis is signed so that its largest-magnitude entry is positive.

    Args:
        standardized: n x p matrix of standardized values.
        standardizer: The standardizer that produced it; projection of raw
            matrices applies it first.
        threshold: Cumulative-variance rule for ``k_selected``.

    Raises:
        DegenerateMatrixError: If n < 2 or the centered matrix has rank 0.
    """
    matrix = np.asarray(standardized, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] < 2:
        raise DegenerateMatrixError("PCA needs at least two rows")
    n, p = matrix.shape
    center = matrix.mean(axis=0)
    centered = matrix - center

    _, singular, vt = np.linalg.svd(centered, full_matrices=True)
    variance = np.zeros(p)
    variance[: singular.size] = singular**2
    total = variance.sum()
    if total <= 0.0 or singular[0] <= 1e-12 * max(1.0, np.abs(matrix).max()):
        raise DegenerateMatrixError("Centered matrix has rank 0")

    loadings = vt.T.copy()
    for k in range(p):
        pivot = int(np.argmax(np.abs(loadings[:, k])))
        if loadings[pivot, k] < 0:
            loadings[:, k] = -loadings[:, k]

    fractions = variance / total
    k_selected = select_components(fractions, threshold)
    logger.debug("PCA on %dx%d matrix: k=%d covers %.3f of variance", n, p, k_selected, fractions[:k_selected].sum())
    return PcaBasis(
        loadings=loadings, explained_fraction=fractions, center=center, k_selected=k_selected, standardizer=standardizer
    )


def pca_project(basis: PcaBasis, matrix: np.ndarray, k: Optional[int] = None) -> np.ndarray:
    """Factor scores of ``matrix`` on the first ``k`` axes (default ``k_selected``).

    Raises:
        DimensionMismatchError: If the column count differs from the basis.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != basis.n_columns:
        raise DimensionMismatchError(basis.n_columns, matrix.shape[-1] if matrix.ndim else 0)
    if basis.standardizer is not None:
        matrix = apply_standardizer(basis.standardizer, matrix)
    k = basis.k_selected if k is None else k
    return (matrix - basis.center) @ basis.loadings[:, :k]


def pca_reconstruct(basis: PcaBasis, scores: np.ndarray) -> np.ndarray:
    """Map scores on the leading axes back to the standardized space."""
    k = scores.shape[1]
    return scores @ basis.loadings[:, :k].T + basis.center


def factor_composition(
    basis: PcaBasis, names: Sequence[str], top: int = 5, k: Optional[int] = None
) -> List[Dict[str, Any]]:
    """Highest-|loading| columns of each leading factor, with its variance fraction."""
    k = basis.k_selected if k is None else k
    report = []
    for factor in range(k):
        column = basis.loadings[:, factor]
        order = np.argsort(-np.abs(column), kind="stable")[:top]
        report.append(
            {
                "factor": factor + 1,
                "explained_fraction": float(basis.explained_fraction[factor]),
                "top_loadings": [{"name": names[j], "loading": float(column[j])} for j in order],
            }
        )
    return report
