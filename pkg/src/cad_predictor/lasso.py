"""L1-penalized logistic regression with cross-validated lambda selection.

The objective is ``(1/n) * sum(logistic loss) + lambda * sum(|beta_j|)`` over
the penalized columns. Each outer iteration forms the IRLS quadratic
approximation at the current coefficients and minimizes it by cyclic
coordinate descent with soft-thresholding, cycling on the active set between
full sweeps. Paths are warm-started from ``lambda_max`` downwards and use
sequential strong rules, re-checked against the KKT conditions.

All non-intercept columns are standardized before fitting; coefficients are
reported on that scale.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import expit, log_expit

from cad_predictor.config.models import LassoConfig
from cad_predictor.core.exceptions import (
    FoldTooSmallError,
    GridEmptyError,
    LengthMismatchError,
    NoClassVariationError,
)
from cad_predictor.core.rng import LASSO_FOLD_STREAM, make_rng
from cad_predictor.impute import ImputedSet
from cad_predictor.transform import Standardizer, apply_standardizer, fit_standardizer

logger = logging.getLogger(__name__)

MIN_WEIGHT = 1e-5
MAX_IRLS = 100
# |r| within this relative margin of lambda thresholds to exactly zero.
THRESHOLD_SLACK = 1e-10


def _penalty_mask(p: int, penalty_mask: Optional[Sequence[bool]]) -> np.ndarray:
    if penalty_mask is None:
        return np.ones(p, dtype=bool)
    mask = np.asarray(penalty_mask, dtype=bool)
    if mask.shape != (p,):
        raise LengthMismatchError(p, int(mask.size), "penalty mask")
    return mask


def penalized_objective(
    X: np.ndarray, y: np.ndarray, coefficients: np.ndarray, lam: float, penalty_mask: Optional[Sequence[bool]] = None
) -> float:
    """Mean logistic loss plus the L1 penalty; ``coefficients[0]`` is the intercept."""
    mask = _penalty_mask(X.shape[1], penalty_mask)
    eta = coefficients[0] + X @ coefficients[1:]
    loss = np.mean(np.logaddexp(0.0, eta) - y * eta)
    return float(loss + lam * np.abs(coefficients[1:][mask]).sum())


def gradient(X: np.ndarray, y: np.ndarray, coefficients: np.ndarray) -> np.ndarray:
    """``(1/n) Xᵀ(y − μ)`` for the non-intercept columns."""
    mu = expit(coefficients[0] + X @ coefficients[1:])
    return X.T @ (y - mu) / X.shape[0]


def kkt_violation(
    X: np.ndarray, y: np.ndarray, coefficients: np.ndarray, lam: float, penalty_mask: Optional[Sequence[bool]] = None
) -> float:
    """Largest deviation from the lasso optimality conditions.

    Active penalized coordinates need ``g_j = lambda * sign(beta_j)``,
    inactive ones ``|g_j| <= lambda``, unpenalized ones and the intercept ``g_j = 0``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mask = _penalty_mask(X.shape[1], penalty_mask)
    mu = expit(coefficients[0] + X @ coefficients[1:])
    g = X.T @ (y - mu) / X.shape[0]
    beta = coefficients[1:]

    violation = np.zeros(X.shape[1])
    active = mask & (beta != 0)
    inactive = mask & (beta == 0)
    violation[active] = np.abs(g[active] - lam * np.sign(beta[active]))
    violation[inactive] = np.maximum(np.abs(g[inactive]) - lam, 0.0)
    violation[~mask] = np.abs(g[~mask])
    return float(max(violation.max(initial=0.0), abs(np.mean(y - mu))))


@dataclass(frozen=True)
class QuadraticSolution:
    coefficients: np.ndarray
    sweeps: int
    converged: bool


def _sweep(
    H: np.ndarray,
    c: np.ndarray,
    beta: np.ndarray,
    q: np.ndarray,
    lam: float,
    penalized: np.ndarray,
    indices: np.ndarray,
) -> float:
    max_change = 0.0
    for j in indices:
        h = H[j, j]
        if h <= 0.0:
            continue
        r = c[j] - q[j] + h * beta[j]
        if penalized[j]:
            magnitude = abs(r) - lam
            new = np.sign(r) * magnitude / h if magnitude > lam * THRESHOLD_SLACK else 0.0
        else:
            new = r / h
        delta = new - beta[j]
        if delta != 0.0:
            q += H[:, j] * delta
            beta[j] = new
            max_change = max(max_change, abs(delta))
    return max_change


def coordinate_descent(
    H: np.ndarray,
    c: np.ndarray,
    beta: np.ndarray,
    lam: float,
    penalized: np.ndarray,
    tol: float,
    max_sweeps: int,
    objective_trace: Optional[List[float]] = None,
) -> QuadraticSolution:
    """Minimize ``½ βᵀHβ − cᵀβ + lam·Σ_penalized |β_j|`` by cyclic coordinate descent.

    Alternates a full sweep with sweeps over the current active set until a
    full sweep moves no coefficient by ``tol`` or more.
    """
    beta = np.array(beta, dtype=np.float64, copy=True)
    q = H @ beta
    everything = np.arange(beta.size)
    sweeps = 0

    def record() -> None:
        if objective_trace is not None:
            objective_trace.append(float(0.5 * beta @ q - c @ beta + lam * np.abs(beta[penalized]).sum()))

    record()
    while sweeps < max_sweeps:
        change = _sweep(H, c, beta, q, lam, penalized, everything)
        sweeps += 1
        record()
        if change < tol:
            return QuadraticSolution(beta, sweeps, True)
        active = np.flatnonzero((beta != 0.0) | ~penalized)
        while sweeps < max_sweeps:
            change = _sweep(H, c, beta, q, lam, penalized, active)
            sweeps += 1
            record()
            if change < tol:
                break
    return QuadraticSolution(beta, sweeps, False)


@dataclass(frozen=True)
class CdResult:
    """One lasso fit at a fixed lambda; ``coefficients[0]`` is the intercept."""

    coefficients: np.ndarray
    converged: bool
    sweeps: int
    objective: float


def cd_fit(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    warm_start: Optional[np.ndarray] = None,
    config: Optional[LassoConfig] = None,
    penalty_mask: Optional[Sequence[bool]] = None,
    columns: Optional[np.ndarray] = None,
) -> CdResult:
    """Fit the penalized logistic model at ``lam``.

    Args:
        X: n x p standardized matrix without an intercept column.
        y: Binary outcome.
        lam: Penalty level.
        warm_start: Starting coefficients (length p + 1, intercept first).
        config: Tolerance and sweep budget.
        penalty_mask: Which of the p columns carry the L1 penalty (default all).
        columns: Restrict the fit to these columns; the rest stay at zero.

    Non-convergence within ``max_sweeps`` is logged and reported through
    ``converged=False``; the best iterate is returned.
    """
    config = config or LassoConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    mask = _penalty_mask(p, penalty_mask)
    cols = np.arange(p) if columns is None else np.asarray(columns, dtype=np.intp)

    full = np.zeros(p + 1) if warm_start is None else np.array(warm_start, dtype=np.float64, copy=True)
    if full.shape != (p + 1,):
        raise LengthMismatchError(p + 1, int(full.size), "warm start")
    outside = np.setdiff1d(np.arange(p), cols)
    full[1 + outside] = 0.0

    design = np.hstack([np.ones((n, 1)), X[:, cols]])
    penalized = np.r_[False, mask[cols]]
    beta = full[np.r_[0, 1 + cols]]

    def objective(b: np.ndarray) -> float:
        eta = design @ b
        return float(np.mean(np.logaddexp(0.0, eta) - y * eta) + lam * np.abs(b[penalized]).sum())

    current = objective(beta)
    sweeps = 0
    converged = False
    for _ in range(MAX_IRLS):
        eta = design @ beta
        mu = expit(eta)
        weights = np.maximum(mu * (1.0 - mu), MIN_WEIGHT)
        working = eta + (y - mu) / weights
        H = (design.T * weights) @ design / n
        c = design.T @ (weights * working) / n

        budget = config.max_sweeps - sweeps
        if budget <= 0:
            break
        solution = coordinate_descent(H, c, beta, lam, penalized, config.tol, budget)
        sweeps += solution.sweeps

        candidate = solution.coefficients
        value = objective(candidate)
        step = 1.0
        while value > current + 1e-14 * max(1.0, abs(current)) and step > 1e-8:
            step /= 2.0
            candidate = beta + step * (solution.coefficients - beta)
            value = objective(candidate)
        if value > current:
            converged = solution.converged
            break
        change = float(np.max(np.abs(candidate - beta)))
        beta, current = candidate, value
        if change < config.tol and solution.converged:
            converged = True
            break

    if not converged:
        logger.warning("Lasso fit at lambda=%.4g stopped after %d sweeps without converging", lam, sweeps)
    full[0] = beta[0]
    full[1 + cols] = beta[1:]
    return CdResult(coefficients=full, converged=converged, sweeps=sweeps, objective=current)


def _null_fit(X: np.ndarray, y: np.ndarray, mask: np.ndarray, config: LassoConfig) -> CdResult:
    unpenalized = np.flatnonzero(~mask)
    if unpenalized.size == 0:
        prevalence = float(np.mean(y))
        coefficients = np.zeros(X.shape[1] + 1)
        coefficients[0] = np.log(prevalence / (1.0 - prevalence))
        return CdResult(coefficients, True, 0, penalized_objective(X, y, coefficients, 0.0, mask))
    return cd_fit(X, y, 0.0, config=config, penalty_mask=mask, columns=unpenalized)


def _check_classes(y: np.ndarray) -> None:
    if y.size == 0 or y.min() == y.max():
        raise NoClassVariationError("Outcome has a single class")


def lambda_max(
    X: np.ndarray, y: np.ndarray, config: Optional[LassoConfig] = None, penalty_mask: Optional[Sequence[bool]] = None
) -> float:
    """Smallest lambda at which every penalized coefficient is zero.

    Gradients are taken at the unpenalized null model (intercept plus any
    unpenalized columns); with none that is ``max |Xⱼᵀ(y − ȳ)| / n``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_classes(y)
    mask = _penalty_mask(X.shape[1], penalty_mask)
    if not mask.any():
        raise GridEmptyError("No penalized columns to build a lambda path for")
    null = _null_fit(X, y, mask, config or LassoConfig())
    return float(np.abs(gradient(X, y, null.coefficients)[mask]).max())


def lambda_path(
    X: np.ndarray, y: np.ndarray, config: Optional[LassoConfig] = None, penalty_mask: Optional[Sequence[bool]] = None
) -> np.ndarray:
    """Strictly decreasing log-spaced grid from ``lambda_max`` to ``lambda_max * lambda_min_ratio``."""
    config = config or LassoConfig()
    top = lambda_max(X, y, config, penalty_mask)
    if top <= 0.0:
        top = np.finfo(np.float64).tiny ** 0.25
    return np.geomspace(top, top * config.lambda_min_ratio, config.lambda_grid_size)


@dataclass(frozen=True)
class PathResult:
    """Coefficients (intercept first) at every lambda of a path."""

    lambdas: np.ndarray
    coefficients: np.ndarray
    converged: np.ndarray

    def active_counts(self, penalty_mask: Optional[Sequence[bool]] = None) -> np.ndarray:
        mask = _penalty_mask(self.coefficients.shape[1] - 1, penalty_mask)
        return (self.coefficients[:, 1:][:, mask] != 0).sum(axis=1)


def fit_path(
    X: np.ndarray,
    y: np.ndarray,
    lambdas: Sequence[float],
    config: Optional[LassoConfig] = None,
    penalty_mask: Optional[Sequence[bool]] = None,
) -> PathResult:
    """Warm-started fits along a decreasing ``lambdas`` grid with strong-rule screening."""
    config = config or LassoConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_classes(y)
    n, p = X.shape
    mask = _penalty_mask(p, penalty_mask)
    lambdas = np.asarray(lambdas, dtype=np.float64)

    beta = _null_fit(X, y, mask, config).coefficients
    g = gradient(X, y, beta)
    top = float(np.abs(g[mask]).max(initial=0.0))
    previous = top
    at_null = True

    coefficients = np.zeros((lambdas.size, p + 1))
    converged = np.zeros(lambdas.size, dtype=bool)
    for k, lam in enumerate(lambdas):
        if at_null and lam >= top:
            # At or above lambda_max the null model is the solution.
            coefficients[k] = beta
            converged[k] = True
            previous = lam
            continue
        at_null = False
        strong = ~mask | (beta[1:] != 0) | (np.abs(g) >= 2.0 * lam - previous)
        while True:
            columns = np.flatnonzero(strong)
            result = cd_fit(X, y, lam, warm_start=beta, config=config, penalty_mask=mask, columns=columns)
            g = gradient(X, y, result.coefficients)
            violators = mask & ~strong & (np.abs(g) > lam)
            if not violators.any():
                break
            logger.debug("Strong rule missed %d columns at lambda=%.4g", int(violators.sum()), lam)
            strong |= violators
            beta = result.coefficients
        beta = result.coefficients
        coefficients[k] = beta
        converged[k] = result.converged
        previous = lam
    return PathResult(lambdas=lambdas, coefficients=coefficients, converged=converged)


def assign_folds(n_rows: int, n_folds: int, seed: int) -> np.ndarray:
    """Fold label of every row: a seeded permutation dealt round-robin into near-equal parts."""
    if n_folds > n_rows:
        raise FoldTooSmallError(
            f"{n_folds} folds requested for {n_rows} rows", context={"n_folds": n_folds, "n_rows": n_rows}
        )
    order = make_rng(seed, LASSO_FOLD_STREAM).permutation(n_rows)
    folds = np.empty(n_rows, dtype=np.intp)
    folds[order] = np.arange(n_rows) % n_folds
    return folds


def validation_error(eta: np.ndarray, y: np.ndarray, criterion: str) -> float:
    """Mean binomial deviance, or misclassification rate at probability 0.5."""
    if criterion == "misclassification":
        return float(np.mean((eta >= 0.0).astype(np.float64) != y))
    return float(-2.0 * np.mean(y * log_expit(eta) + (1.0 - y) * log_expit(-eta)))


def _fold_errors(
    X: np.ndarray,
    y: np.ndarray,
    train: np.ndarray,
    lambdas: np.ndarray,
    config: LassoConfig,
    mask: np.ndarray,
    standardizer: Optional[Standardizer],
) -> np.ndarray:
    if standardizer is None:
        fold_standardizer = fit_standardizer(X[train], strict=False)
        Xs = apply_standardizer(fold_standardizer, X)
    else:
        Xs = apply_standardizer(standardizer, X)
    path = fit_path(Xs[train], y[train], lambdas, config, mask)
    held_out = ~train
    errors = np.empty(lambdas.size)
    for k in range(lambdas.size):
        eta = path.coefficients[k, 0] + Xs[held_out] @ path.coefficients[k, 1:]
        errors[k] = validation_error(eta, y[held_out], config.criterion)
    return errors


@dataclass(frozen=True)
class LassoFit:
    """Cross-validated lasso model; coefficients are on the standardized scale, intercept first."""

    lambda_selected: float
    lambdas: np.ndarray
    coefficients: np.ndarray
    feature_names: Tuple[str, ...]
    penalty_mask: np.ndarray
    standardizer: Standardizer
    cv_mean: np.ndarray
    cv_se: np.ndarray
    criterion: str = "deviance"
    converged: bool = True

    @property
    def selected_index(self) -> int:
        return int(np.flatnonzero(self.lambdas == self.lambda_selected)[0])

    @property
    def active_set(self) -> Tuple[str, ...]:
        """Names of all columns with a nonzero coefficient."""
        return tuple(name for name, b in zip(self.feature_names, self.coefficients[1:]) if b != 0.0)

    @property
    def selected_features(self) -> Tuple[str, ...]:
        """Penalized columns the lasso kept."""
        beta = self.coefficients[1:]
        return tuple(name for name, b, m in zip(self.feature_names, beta, self.penalty_mask) if m and b != 0.0)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        Xs = apply_standardizer(self.standardizer, X)
        return expit(self.coefficients[0] + Xs @ self.coefficients[1:])

    def top_associations(self, n: int = 5) -> Dict[str, List[Tuple[str, float]]]:
        """Largest positive and most negative penalized coefficients."""
        pairs = [
            (name, float(b))
            for name, b, m in zip(self.feature_names, self.coefficients[1:], self.penalty_mask)
            if m and b != 0.0
        ]
        positive = sorted((pair for pair in pairs if pair[1] > 0), key=lambda pair: (-pair[1], pair[0]))[:n]
        negative = sorted((pair for pair in pairs if pair[1] < 0), key=lambda pair: (pair[1], pair[0]))[:n]
        return {"positive": positive, "negative": negative}

    def coefficient_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "name": ["(intercept)", *self.feature_names],
                "coefficient": self.coefficients,
                "penalized": [False, *[bool(m) for m in self.penalty_mask]],
            }
        )

    def cv_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"lambda": self.lambdas, "cv_mean": self.cv_mean, "cv_se": self.cv_se})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lambda_selected": self.lambda_selected,
            "criterion": self.criterion,
            "converged": self.converged,
            "n_selected": len(self.selected_features),
            "selected_features": list(self.selected_features),
            "top_associations": self.top_associations(),
        }


def cv_select(
    X: np.ndarray,
    y: np.ndarray,
    config: Optional[LassoConfig] = None,
    penalty_mask: Optional[Sequence[bool]] = None,
    feature_names: Optional[Sequence[str]] = None,
    n_jobs: int = 1,
) -> LassoFit:
    """Select lambda by K-fold cross-validation and refit on all rows.

    Args:
        X: Raw n x p feature matrix (standardized internally).
        y: Binary outcome.
        config: Fold count, grid and criterion.
        penalty_mask: Penalized columns (default all).
        feature_names: Column names for reports.
        n_jobs: Worker processes across folds.

    Raises:
        FoldTooSmallError: If there are more folds than rows or a training
            complement lacks one of the classes.
    """
    config = config or LassoConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    _check_classes(y)
    mask = _penalty_mask(p, penalty_mask)
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{j}" for j in range(p))

    folds = assign_folds(n, config.n_folds, config.seed)
    for fold in range(config.n_folds):
        complement = y[folds != fold]
        if complement.min() == complement.max():
            raise FoldTooSmallError(
                f"Training complement of fold {fold} has a single class", context={"fold": fold}
            )

    standardizer = fit_standardizer(X, column_names=names, strict=False)
    Xs = apply_standardizer(standardizer, X)
    lambdas = lambda_path(Xs, y, config, mask)
    shared = standardizer if config.global_standardize else None

    errors = np.vstack(
        Parallel(n_jobs=n_jobs)(
            delayed(_fold_errors)(X, y, folds != fold, lambdas, config, mask, shared) for fold in range(config.n_folds)
        )
    )
    cv_mean = errors.mean(axis=0)
    cv_se = errors.std(axis=0, ddof=1) / np.sqrt(config.n_folds)
    # argmin returns the first minimum, i.e. the larger lambda on ties.
    best = int(np.argmin(cv_mean))

    path = fit_path(Xs, y, lambdas[: best + 1], config, mask)
    fit = LassoFit(
        lambda_selected=float(lambdas[best]),
        lambdas=lambdas,
        coefficients=path.coefficients[best],
        feature_names=names,
        penalty_mask=mask,
        standardizer=standardizer,
        cv_mean=cv_mean,
        cv_se=cv_se,
        criterion=config.criterion,
        converged=bool(path.converged[best]),
    )
    logger.info(
        "Lasso CV (%d folds): lambda=%.4g (index %d), %d selected",
        config.n_folds,
        fit.lambda_selected,
        best,
        len(fit.selected_features),
    )
    return fit


@dataclass(frozen=True)
class LassoReport:
    """Per-imputation lasso fits and the agreement of their selected sets."""

    fits: Tuple[LassoFit, ...]
    adjusted: bool = False

    @property
    def selected_counts(self) -> List[int]:
        return [len(fit.selected_features) for fit in self.fits]

    @property
    def union(self) -> Tuple[str, ...]:
        names = set().union(*(fit.selected_features for fit in self.fits))
        return tuple(name for name in self.fits[0].feature_names if name in names)

    @property
    def intersection(self) -> Tuple[str, ...]:
        names = set(self.fits[0].selected_features).intersection(*(fit.selected_features for fit in self.fits[1:]))
        return tuple(name for name in self.fits[0].feature_names if name in names)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "adjusted": self.adjusted,
            "selected_counts": self.selected_counts,
            "union_size": len(self.union),
            "intersection_size": len(self.intersection),
            "union": list(self.union),
            "intersection": list(self.intersection),
            "fits": [fit.to_dict() for fit in self.fits],
        }

    def save(self, directory: Union[str, Path]) -> None:
        """Write per-imputation coefficient and CV-curve CSVs plus a summary."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for k, fit in enumerate(self.fits, start=1):
            fit.coefficient_frame().to_csv(directory / f"coefficients_imp{k}.csv", index=False, float_format="%.17g")
            fit.cv_frame().to_csv(directory / f"cv_curve_imp{k}.csv", index=False, float_format="%.17g")
        (directory / "active_sets.json").write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")


def lasso_penalty_mask(n_metabolites: int, n_covariates: int, penalize_covariates: bool) -> np.ndarray:
    """Mask for the ``CohortTable.features`` layout: metabolites, then covariates."""
    return np.r_[np.ones(n_metabolites, dtype=bool), np.full(n_covariates, penalize_covariates, dtype=bool)]


def lasso_across_imputations(
    imputed: ImputedSet,
    config: LassoConfig,
    adjusted: bool,
    rows: Optional[Sequence[int]] = None,
    n_jobs: int = 1,
) -> LassoReport:
    """Run :func:`cv_select` independently on every completed table."""
    fits = []
    schema = imputed.schema
    names = tuple(schema.metabolite_names) + (tuple(schema.covariate_names) if adjusted else ())
    mask = lasso_penalty_mask(
        len(schema.metabolite_names), len(schema.covariate_names) if adjusted else 0, config.penalize_covariates
    )
    for k, table in enumerate(imputed.tables, start=1):
        if rows is not None:
            table = table.subset(rows)
        logger.info("Lasso on imputation %d/%d (%s)", k, imputed.m, "adjusted" if adjusted else "unadjusted")
        fits.append(cv_select(table.features(adjusted), table.outcome, config, mask, names, n_jobs=n_jobs))
    report = LassoReport(fits=tuple(fits), adjusted=adjusted)
    logger.info(
        "Lasso selected %s metabolites per imputation; union %d, intersection %d",
        report.selected_counts,
        len(report.union),
        len(report.intersection),
    )
    return report
