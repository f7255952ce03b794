"""Multiple imputation by chained equations with predictive mean matching.

Each of the M chains starts from a random draw of observed values, then
sweeps the incomplete columns in order of increasing missingness. A sweep
regresses the target column on every other column (plus the outcome) by
least squares and replaces each missing cell with the observed value of a
donor drawn from the ``pmm_donors`` rows with the nearest predictions.

Also provides Rubin's rules and the averaging of per-imputation predictions.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
from joblib import Parallel, delayed
from scipy.stats import norm

from cad_predictor.cohort import CohortSchema, CohortTable, load_csv, write_csv
from cad_predictor.config.models import ImputeConfig
from cad_predictor.core.exceptions import (
    EmptyInputError,
    ImputationError,
    LengthMismatchError,
    OutOfRangeError,
    TooFewObservedError,
)
from cad_predictor.core.rng import IMPUTE_STREAM, derive_seed, make_rng

logger = logging.getLogger(__name__)

# Ridge added to the normal equations, relative to their diagonal.
RIDGE = 1e-5
MANIFEST_NAME = "manifest.json"

VisitHook = Callable[[int, int, int], None]
"""Called as ``hook(chain, iteration, column)`` before each column update."""


@dataclass(frozen=True)
class ImputedSet:
    """M completed copies of a cohort table."""

    tables: Tuple[CohortTable, ...]
    source_mask: np.ndarray
    config: ImputeConfig
    chain_seeds: Tuple[int, ...] = ()

    @property
    def m(self) -> int:
        return len(self.tables)

    @property
    def schema(self) -> CohortSchema:
        return self.tables[0].schema

    def save(self, directory: Union[str, Path]) -> List[Path]:
        """Write ``imp1.csv`` ... ``impM.csv`` and a manifest to ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for k, table in enumerate(self.tables, start=1):
            path = directory / f"imp{k}.csv"
            write_csv(table, path)
            files.append(path)
        manifest = {
            "config": self.config.model_dump(mode="json"),
            "schema": self.schema.model_dump(mode="json"),
            "chain_seeds": [str(seed) for seed in self.chain_seeds],
            "files": [path.name for path in files],
            "n_rows": int(self.source_mask.shape[0]),
            "n_features": int(self.source_mask.shape[1]),
            "source_missing": [[int(i), int(j)] for i, j in np.argwhere(self.source_mask)],
        }
        (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        return files

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "ImputedSet":
        directory = Path(directory)
        manifest_path = directory / MANIFEST_NAME
        if not manifest_path.exists():
            raise ImputationError(
                f"No imputation manifest in {directory}",
                error_code="MANIFEST_NOT_FOUND",
                context={"directory": str(directory)},
            )
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        schema = CohortSchema.model_validate(manifest["schema"])
        tables = tuple(load_csv(directory / name, schema) for name in manifest["files"])
        mask = np.zeros((manifest["n_rows"], manifest["n_features"]), dtype=bool)
        for i, j in manifest["source_missing"]:
            mask[i, j] = True
        return cls(
            tables=tables,
            source_mask=mask,
            config=ImputeConfig.model_validate(manifest["config"]),
            chain_seeds=tuple(int(seed) for seed in manifest["chain_seeds"]),
        )


def visit_order(missing: np.ndarray) -> List[int]:
    """Incomplete columns sorted by missing count, then column index."""
    counts = missing.sum(axis=0)
    return sorted((int(j) for j in np.flatnonzero(counts)), key=lambda j: (int(counts[j]), j))


def _solve_normal_equations(gram: np.ndarray, rhs: np.ndarray) -> Optional[np.ndarray]:
    diag = np.diag(gram)
    keep = diag > 0
    beta = np.zeros(rhs.size)
    if not keep.any():
        return None
    reduced = gram[np.ix_(keep, keep)] + np.diag(RIDGE * diag[keep])
    try:
        factor = scipy.linalg.cho_factor(reduced)
        solution = scipy.linalg.cho_solve(factor, rhs[keep])
    except (np.linalg.LinAlgError, ValueError):
        return None
    if not np.isfinite(solution).all():
        return None
    beta[keep] = solution
    return beta


def _pmm_draw(
    pred_observed: np.ndarray,
    pred_missing: np.ndarray,
    donor_values: np.ndarray,
    n_donors: int,
    rng: np.random.Generator,
) -> np.ndarray:
    # Stable sort keeps row order among equal distances, so ties favour the lowest row.
    k = min(n_donors, pred_observed.size)
    drawn = np.empty(pred_missing.size)
    for i, target in enumerate(pred_missing):
        nearest = np.argsort(np.abs(pred_observed - target), kind="stable")[:k]
        drawn[i] = donor_values[nearest[rng.integers(k)]]
    return drawn


def _column_gram(work: np.ndarray, fit_idx: Optional[np.ndarray], col: int) -> np.ndarray:
    if fit_idx is None:
        return work.T @ work[:, col]
    rows = work[fit_idx]
    return rows.T @ rows[:, col]


def _run_chain(
    table: CohortTable,
    config: ImputeConfig,
    order: Sequence[int],
    fit_mask: np.ndarray,
    chain: int,
    visit_hook: Optional[VisitHook],
) -> np.ndarray:
    rng = make_rng(config.seed, IMPUTE_STREAM, chain)
    n, p = table.values.shape
    missing = table.missing
    fit_idx = None if fit_mask.all() else np.flatnonzero(fit_mask)

    # Working design: intercept, features, outcome.
    work = np.empty((n, p + 2))
    work[:, 0] = 1.0
    work[:, 1 : p + 1] = table.values
    work[:, p + 1] = table.outcome

    for j in order:
        mis = missing[:, j]
        pool = work[~mis & fit_mask, j + 1]
        work[mis, j + 1] = rng.choice(pool, size=int(mis.sum()), replace=True)

    gram = work.T @ work if fit_idx is None else work[fit_idx].T @ work[fit_idx]

    for iteration in range(config.chain_iterations):
        for j in order:
            if visit_hook is not None:
                visit_hook(chain, iteration, j)
            col = j + 1
            mis = missing[:, j]
            obs_fit = ~mis & fit_mask
            removed = work[mis & fit_mask]
            gram_obs = gram - removed.T @ removed

            others = np.r_[0:col, col + 1 : p + 2]
            beta_others = _solve_normal_equations(gram_obs[np.ix_(others, others)], gram_obs[others, col])
            if beta_others is None:
                logger.debug(
                    "Chain %d: singular regression for %s, drawing unconditionally", chain, table.feature_names[j]
                )
                work[mis, col] = rng.choice(work[obs_fit, col], size=int(mis.sum()), replace=True)
            else:
                beta = np.zeros(p + 2)
                beta[others] = beta_others
                predicted = work @ beta
                work[mis, col] = _pmm_draw(
                    predicted[obs_fit], predicted[mis], work[obs_fit, col], config.pmm_donors, rng
                )

            refreshed = _column_gram(work, fit_idx, col)
            gram[:, col] = refreshed
            gram[col, :] = refreshed

    return work[:, 1 : p + 1].copy()


def mice_pmm(
    table: CohortTable,
    config: ImputeConfig,
    fit_rows: Optional[Sequence[int]] = None,
    visit_hook: Optional[VisitHook] = None,
    n_jobs: int = 1,
) -> ImputedSet:
    """Impute every missing cell of ``table`` M times.

    Args:
        table: Cohort with missing cells.
        config: Imputation settings.
        fit_rows: When given, regressions and donor pools use only these rows
            (training-only imputation); all missing cells are still filled.
        visit_hook: Instrumentation callback, see :data:`VisitHook`.
        n_jobs: Worker threads for the independent chains.

    Raises:
        TooFewObservedError: If an incomplete column has fewer than
            ``pmm_donors + 1`` observed values available for fitting.
    """
    fit_mask = np.ones(table.n_rows, dtype=bool)
    if fit_rows is not None:
        fit_mask[:] = False
        fit_mask[np.asarray(fit_rows, dtype=np.intp)] = True

    order = visit_order(table.missing)
    for j in order:
        observed = int((~table.missing[:, j] & fit_mask).sum())
        if observed < config.pmm_donors + 1:
            raise TooFewObservedError(table.feature_names[j], observed, config.pmm_donors + 1)

    m = config.m_imputations
    chain_seeds = tuple(derive_seed(config.seed, IMPUTE_STREAM, chain) for chain in range(m))
    if not order:
        logger.info("No missing cells; returning %d identical copies", m)
        completed = table.completed(table.values)
        return ImputedSet(tables=(completed,) * m, source_mask=table.missing, config=config, chain_seeds=chain_seeds)

    logger.info(
        "Imputing %d cells in %d columns: M=%d, %d iterations, %d donors",
        int(table.missing.sum()),
        len(order),
        m,
        config.chain_iterations,
        config.pmm_donors,
    )
    results = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_run_chain)(table, config, order, fit_mask, chain, visit_hook) for chain in range(m)
    )
    tables = tuple(table.completed(values) for values in results)
    return ImputedSet(tables=tables, source_mask=table.missing, config=config, chain_seeds=chain_seeds)


@dataclass(frozen=True)
class PooledEstimate:
    """Estimates combined across imputations by Rubin's rules."""

    point: np.ndarray
    within_var: np.ndarray
    between_var: np.ndarray
    total_var: np.ndarray
    m: int

    @property
    def std_error(self) -> np.ndarray:
        return np.sqrt(self.total_var)

    @property
    def z(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.point / self.std_error

    @property
    def p_values(self) -> np.ndarray:
        """Two-sided Wald p-values against the standard normal."""
        return 2.0 * norm.sf(np.abs(self.z))


def rubin_pool(estimates: Sequence[Tuple[np.ndarray, np.ndarray]]) -> PooledEstimate:
    """Combine M (point, variance) pairs.

    Raises:
        ImputationError: If fewer than two estimates are given.
        LengthMismatchError: If vectors differ in length.
    """
    m = len(estimates)
    if m < 2:
        raise ImputationError(
            f"Rubin's rules need at least two estimates, got {m}",
            error_code="TOO_FEW_IMPUTATIONS",
            context={"m": m},
        )
    points = [np.atleast_1d(np.asarray(point, dtype=np.float64)) for point, _ in estimates]
    variances = [np.atleast_1d(np.asarray(var, dtype=np.float64)) for _, var in estimates]
    length = points[0].size
    for vector in points + variances:
        if vector.size != length:
            raise LengthMismatchError(length, vector.size, "estimate")

    stacked = np.vstack(points)
    point = stacked.mean(axis=0)
    within = np.vstack(variances).mean(axis=0)
    between = stacked.var(axis=0, ddof=1)
    total = within + (1.0 + 1.0 / m) * between
    return PooledEstimate(point=point, within_var=within, between_var=between, total_var=total, m=m)


def pool_predictions(prob_vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Componentwise mean of per-imputation probability vectors.

    Raises:
        EmptyInputError, LengthMismatchError, OutOfRangeError
    """
    if len(prob_vectors) == 0:
        raise EmptyInputError("No probability vectors to pool")
    vectors = [np.asarray(vector, dtype=np.float64).ravel() for vector in prob_vectors]
    length = vectors[0].size
    for vector in vectors:
        if vector.size != length:
            raise LengthMismatchError(length, vector.size, "probability vector")
        bad = np.flatnonzero(~((vector >= 0.0) & (vector <= 1.0)))
        if bad.size:
            raise OutOfRangeError(float(vector[bad[0]]))
    return np.mean(np.vstack(vectors), axis=0)
