"""Unpenalized logistic regression by IRLS, Wald inference and Bonferroni screening."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.linalg
from joblib import Parallel, delayed
from scipy.special import expit, log_expit
from scipy.stats import norm

from cad_predictor.core.exceptions import (
    CadPredictorError,
    ModelFitError,
    NoClassVariationError,
    SingularInformationError,
)
from cad_predictor.impute import ImputedSet, rubin_pool
from cad_predictor.transform import log1p_matrix

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.05
# Every observation fitted to within this residual means the classes are separated.
SEPARATION_RESIDUAL = 1e-6
MAX_HALVINGS = 40


def log_likelihood(X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> float:
    eta = X @ beta
    return float(np.sum(y * log_expit(eta) + (1.0 - y) * log_expit(-eta)))


@dataclass(frozen=True)
class GlmFit:
    """A fitted logistic regression; ``coefficients[0]`` is the intercept."""

    coefficients: np.ndarray
    standard_errors: np.ndarray
    log_likelihood: float
    converged: bool
    iterations: int
    separated: bool = False
    names: Tuple[str, ...] = ()
    log_likelihood_trace: Tuple[float, ...] = field(default=(), repr=False)

    @property
    def z_values(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coefficients / self.standard_errors

    @property
    def p_values(self) -> np.ndarray:
        return 2.0 * norm.sf(np.abs(self.z_values))

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return expit(np.asarray(X, dtype=np.float64) @ self.coefficients)


def with_intercept(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return np.hstack([np.ones((X.shape[0], 1)), X])


def fit_logistic(
    X: np.ndarray,
    y: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 100,
    names: Sequence[str] = (),
) -> GlmFit:
    """Newton-Raphson / IRLS with step-halving.

    Args:
        X: Design matrix including the intercept column.
        y: Binary outcome.
        tol: Convergence bound on the max-norm of the score Xᵀ(y − μ).
        max_iter: Iteration cap; reaching it sets ``converged=False``.

    Raises:
        NoClassVariationError: If ``y`` has a single class.
        SingularInformationError: If XᵀWX is singular at the start.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    if y.shape != (n,):
        raise ModelFitError("outcome length differs from design rows", error_code="SHAPE_MISMATCH")
    if y.min() == y.max():
        raise NoClassVariationError("Outcome has a single class")
    if n <= p:
        raise SingularInformationError(
            f"Need more rows than columns ({n} <= {p})", context={"n_rows": n, "n_columns": p}
        )

    beta = np.zeros(p)
    ll = log_likelihood(X, y, beta)
    trace = [ll]
    converged = False
    separated = False
    iterations = 0
    information = None

    for iterations in range(1, max_iter + 1):
        mu = expit(X @ beta)
        score = X.T @ (y - mu)
        if np.max(np.abs(y - mu)) < SEPARATION_RESIDUAL:
            separated = True
            break
        if np.max(np.abs(score)) < tol:
            converged = True
            break
        weights = mu * (1.0 - mu)
        information = X.T @ (X * weights[:, None])
        try:
            step = scipy.linalg.solve(information, score, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning):
            if iterations == 1:
                raise SingularInformationError("Information matrix XᵀWX is singular")
            separated = True
            break

        scale = 1.0
        candidate = beta + step
        new_ll = log_likelihood(X, y, candidate)
        halvings = 0
        while new_ll < ll and halvings < MAX_HALVINGS:
            scale /= 2.0
            candidate = beta + scale * step
            new_ll = log_likelihood(X, y, candidate)
            halvings += 1
        if new_ll < ll:
            break
        beta, ll = candidate, new_ll
        trace.append(ll)
    else:
        mu = expit(X @ beta)
        converged = bool(np.max(np.abs(X.T @ (y - mu))) < tol)

    mu = expit(X @ beta)
    weights = mu * (1.0 - mu)
    information = X.T @ (X * weights[:, None])
    try:
        covariance = scipy.linalg.inv(information)
        standard_errors = np.sqrt(np.maximum(np.diag(covariance), 0.0))
        standard_errors[standard_errors == 0.0] = np.inf
    except (np.linalg.LinAlgError, ValueError):
        standard_errors = np.full(p, np.inf)

    if separated:
        logger.debug("Logistic fit separated after %d iterations (|beta|=%.3g)", iterations, np.abs(beta).max())
        converged = False
    return GlmFit(
        coefficients=beta,
        standard_errors=standard_errors,
        log_likelihood=ll,
        converged=converged,
        iterations=iterations,
        separated=separated,
        names=tuple(names),
        log_likelihood_trace=tuple(trace),
    )


@dataclass(frozen=True)
class ScreeningRecord:
    name: str
    coefficient: float
    standard_error: float
    p_value: float
    bonferroni_significant: bool
    error: Optional[str] = None


@dataclass(frozen=True)
class ScreeningResult:
    """Per-metabolite associations with a Bonferroni flag over ``n_tests``."""

    records: Tuple[ScreeningRecord, ...]
    n_tests: int
    alpha: float = DEFAULT_ALPHA
    adjusted: bool = False

    @property
    def threshold(self) -> float:
        return self.alpha / self.n_tests

    @property
    def significant(self) -> List[str]:
        return [record.name for record in self.records if record.bonferroni_significant]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "name": [r.name for r in self.records],
                "estimate": [r.coefficient for r in self.records],
                "se": [r.standard_error for r in self.records],
                "p": [r.p_value for r in self.records],
                "significant": [r.bonferroni_significant for r in self.records],
                "adjusted": [self.adjusted] * len(self.records),
                "error": [r.error or "" for r in self.records],
            }
        )

    def save_csv(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def _screen_one(
    name: str,
    columns: Sequence[np.ndarray],
    covariates: Sequence[Optional[np.ndarray]],
    outcomes: Sequence[np.ndarray],
) -> Tuple[str, Optional[Tuple[float, float, float]], Optional[str]]:
    try:
        estimates = []
        for column, extra, y in zip(columns, covariates, outcomes):
            parts = [log1p_matrix(column[:, None])]
            if extra is not None:
                parts.append(extra)
            fit = fit_logistic(with_intercept(np.hstack(parts)), y)
            estimates.append((fit.coefficients[1:2], fit.standard_errors[1:2] ** 2))
        pooled = rubin_pool(estimates)
        return name, (float(pooled.point[0]), float(pooled.std_error[0]), float(pooled.p_values[0])), None
    except CadPredictorError as e:
        return name, None, f"{e.error_code}: {e}"


def screen_metabolites(
    imputed: ImputedSet,
    adjusted: bool,
    rows: Optional[Sequence[int]] = None,
    alpha: float = DEFAULT_ALPHA,
    n_jobs: int = 1,
) -> ScreeningResult:
    """Fit outcome ~ log1p(metabolite) [+ covariates] for every metabolite.

    Estimates are pooled across imputations by Rubin's rules; p-values are
    two-sided Wald against the normal. Fit failures are recorded per
    metabolite and never abort the screen.

    Args:
        imputed: Completed tables.
        adjusted: Append the schema covariates (unstandardized) to each model.
        rows: Restrict fitting to these rows (e.g. the training split).
        alpha: Family-wise level; the per-test threshold is alpha / n_tests.
        n_jobs: Worker processes across metabolites.
    """
    tables = [table if rows is None else table.subset(rows) for table in imputed.tables]
    names = list(tables[0].schema.metabolite_names)
    outcomes = [table.outcome.astype(np.float64) for table in tables]
    covariates = [table.covariates if adjusted else None for table in tables]

    results = Parallel(n_jobs=n_jobs)(
        delayed(_screen_one)(name, [table.metabolites[:, j] for table in tables], covariates, outcomes)
        for j, name in enumerate(names)
    )

    n_tests = len(names)
    threshold = alpha / n_tests
    records = []
    for name, estimate, error in results:
        if estimate is None:
            logger.warning("Screening fit failed for %s: %s", name, error)
            records.append(ScreeningRecord(name, np.nan, np.nan, np.nan, False, error))
            continue
        coefficient, standard_error, p_value = estimate
        significant = bool(np.isfinite(p_value) and p_value < threshold)
        records.append(ScreeningRecord(name, coefficient, standard_error, p_value, significant))
    result = ScreeningResult(records=tuple(records), n_tests=n_tests, alpha=alpha, adjusted=adjusted)
    logger.info(
        "Screened %d metabolites (%s): %d below %.3g",
        n_tests,
        "adjusted" if adjusted else "unadjusted",
        len(result.significant),
        threshold,
    )
    return result


@dataclass(frozen=True)
class FactorModels:
    """Single-factor fits, the joint fit on all k factors, and Bonferroni flags."""

    single_fits: Tuple[GlmFit, ...]
    joint_fit: GlmFit
    adjusted: bool
    alpha: float = DEFAULT_ALPHA

    @property
    def k(self) -> int:
        return len(self.single_fits)

    @property
    def single_p_values(self) -> np.ndarray:
        return np.array([fit.p_values[1] for fit in self.single_fits])

    @property
    def single_significant(self) -> np.ndarray:
        return self.single_p_values < self.alpha / self.k

    @property
    def joint_p_values(self) -> np.ndarray:
        return self.joint_fit.p_values[1 : self.k + 1]

    @property
    def joint_significant(self) -> np.ndarray:
        return self.joint_p_values < self.alpha / self.k

    def design(self, scores: np.ndarray, covariates: Optional[np.ndarray] = None) -> np.ndarray:
        parts = [np.asarray(scores, dtype=np.float64)]
        if self.adjusted:
            if covariates is None:
                raise ModelFitError("adjusted factor model needs covariates", error_code="MISSING_COVARIATES")
            parts.append(np.asarray(covariates, dtype=np.float64))
        return with_intercept(np.hstack(parts))

    def predict_proba(self, scores: np.ndarray, covariates: Optional[np.ndarray] = None) -> np.ndarray:
        """Probabilities from the joint model."""
        return self.joint_fit.predict_proba(self.design(scores, covariates))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "factor": np.arange(1, self.k + 1),
                "single_estimate": [fit.coefficients[1] for fit in self.single_fits],
                "single_p": self.single_p_values,
                "single_significant": self.single_significant,
                "joint_estimate": self.joint_fit.coefficients[1 : self.k + 1],
                "joint_p": self.joint_p_values,
                "joint_significant": self.joint_significant,
                "adjusted": [self.adjusted] * self.k,
            }
        )


def fit_factor_models(
    scores: np.ndarray,
    y: np.ndarray,
    covariates: Optional[np.ndarray] = None,
    adjusted: bool = False,
    alpha: float = DEFAULT_ALPHA,
) -> FactorModels:
    """One logistic fit per factor plus a joint fit on all k factors.

    Adjusted variants append the covariates to every model.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores[:, None]
    k = scores.shape[1]
    if k < 1:
        raise ModelFitError("need at least one factor", error_code="NO_FACTORS")
    if adjusted and covariates is None:
        raise ModelFitError("adjusted factor models need covariates", error_code="MISSING_COVARIATES")
    extra = [np.asarray(covariates, dtype=np.float64)] if adjusted and covariates is not None else []

    single = tuple(fit_logistic(with_intercept(np.hstack([scores[:, [i]], *extra])), y) for i in range(k))
    joint = fit_logistic(with_intercept(np.hstack([scores, *extra])), y)
    models = FactorModels(single_fits=single, joint_fit=joint, adjusted=adjusted, alpha=alpha)
    logger.debug("Factor models (k=%d, adjusted=%s): single-significant %s", k, adjusted, models.single_significant)
    return models
