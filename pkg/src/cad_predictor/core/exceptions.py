"""Exception hierarchy for the CAD predictor.

Every error carries a human-readable message, a stable machine-readable
``error_code`` and a ``context`` dict with the values that triggered it.
"""

from typing import Any, Dict, Optional


class CadPredictorError(Exception):
    """Base class for all package errors."""

    default_code = "CAD_PREDICTOR_ERROR"

    def __init__(self, message: str, error_code: str = "", context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.error_code = error_code or self.default_code
        self.context = context or {}


class ConfigurationError(CadPredictorError):
    """Configuration loading or validation failed."""

    default_code = "CONFIG_ERROR"


# Shared


class LengthMismatchError(CadPredictorError):
    default_code = "LENGTH_MISMATCH"

    def __init__(self, expected: int, actual: int, what: str = "vector"):
        super().__init__(
            f"Length mismatch for {what}: expected {expected}, got {actual}",
            context={"expected": expected, "actual": actual, "what": what},
        )


class OutOfRangeError(CadPredictorError):
    default_code = "OUT_OF_RANGE"

    def __init__(self, value: float, low: float = 0.0, high: float = 1.0):
        super().__init__(
            f"Value {value!r} outside [{low}, {high}]",
            context={"value": value, "low": low, "high": high},
        )


class EmptyInputError(CadPredictorError):
    default_code = "EMPTY_INPUT"


# Cohort


class DataValidationError(CadPredictorError):
    """A cohort file or table violates its schema."""

    default_code = "DATA_VALIDATION_FAILED"


class MissingColumnError(DataValidationError):
    default_code = "MISSING_COLUMN"

    def __init__(self, name: str):
        super().__init__(f"Required column missing from header: {name}", context={"column": name})


class UnparseableCellError(DataValidationError):
    default_code = "UNPARSEABLE_CELL"

    def __init__(self, row: int, col: str, text: str):
        super().__init__(
            f"Cannot parse cell at row {row}, column {col!r} as a finite number: {text!r}",
            context={"row": row, "column": col, "text": text},
        )


class MissingOutcomeError(DataValidationError):
    default_code = "MISSING_OUTCOME"

    def __init__(self, row: int):
        super().__init__(f"Outcome is missing at row {row}", context={"row": row})


class NonBinaryOutcomeError(DataValidationError):
    default_code = "NON_BINARY_OUTCOME"

    def __init__(self, row: int, text: str = ""):
        super().__init__(f"Outcome at row {row} is not 0/1: {text!r}", context={"row": row, "text": text})


class TooFewRowsError(DataValidationError):
    default_code = "TOO_FEW_ROWS"

    def __init__(self, n_rows: int, minimum: int):
        super().__init__(
            f"Need at least {minimum} rows, got {n_rows}", context={"n_rows": n_rows, "minimum": minimum}
        )


# Imputation


class ImputationError(CadPredictorError):
    default_code = "IMPUTATION_FAILED"


class TooFewObservedError(ImputationError):
    default_code = "TOO_FEW_OBSERVED"

    def __init__(self, column: str, observed: int, required: int):
        super().__init__(
            f"Column {column!r} has {observed} observed values, needs at least {required}",
            context={"column": column, "observed": observed, "required": required},
        )


class SingularRegressionError(ImputationError):
    default_code = "SINGULAR_REGRESSION"

    def __init__(self, column: str):
        super().__init__(f"Imputation regression for {column!r} is singular", context={"column": column})


# Transform


class TransformError(CadPredictorError):
    default_code = "TRANSFORM_FAILED"


class DomainError(TransformError):
    default_code = "DOMAIN_ERROR"


class ConstantColumnError(TransformError):
    default_code = "CONSTANT_COLUMN"

    def __init__(self, name: str):
        super().__init__(f"Column {name!r} is constant and cannot be standardized", context={"column": name})


class DegenerateMatrixError(TransformError):
    default_code = "DEGENERATE_MATRIX"


class DimensionMismatchError(TransformError):
    default_code = "DIMENSION_MISMATCH"

    def __init__(self, expected: int, actual: int):
        super().__init__(
            f"Expected {expected} columns, got {actual}", context={"expected": expected, "actual": actual}
        )


# Model fitting


class ModelFitError(CadPredictorError):
    default_code = "MODEL_FIT_FAILED"


class SingularInformationError(ModelFitError):
    default_code = "SINGULAR_INFORMATION"


class NoClassVariationError(ModelFitError):
    default_code = "NO_CLASS_VARIATION"


class NoConvergenceError(ModelFitError):
    default_code = "NO_CONVERGENCE"


class FoldTooSmallError(ModelFitError):
    default_code = "FOLD_TOO_SMALL"


class EmptyNodeError(ModelFitError):
    default_code = "EMPTY_NODE"


class GridEmptyError(ModelFitError):
    default_code = "GRID_EMPTY"


class NoSplitsError(ModelFitError):
    default_code = "NO_SPLITS"


# Evaluation / generation / orchestration


class OneClassOnlyError(CadPredictorError):
    default_code = "ONE_CLASS_ONLY"


class InfeasibleConfigError(CadPredictorError):
    default_code = "INFEASIBLE_CONFIG"


class PipelineStageError(CadPredictorError):
    """A pipeline stage failed; wraps the underlying error."""

    default_code = "STAGE_FAILED"

    def __init__(self, stage: str, cause: BaseException):
        code = getattr(cause, "error_code", "") or type(cause).__name__
        super().__init__(
            f"Stage '{stage}' failed: {cause}",
            error_code=code,
            context={"stage": stage, **getattr(cause, "context", {})},
        )
        self.stage = stage
        self.cause = cause
