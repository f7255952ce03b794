"""Validated configuration models.

Each stage of the pipeline takes one of these models; ``PipelineConfig``
bundles them for the end-to-end run.
"""

from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

Criterion = Literal["deviance", "misclassification"]
Variant = Literal["unadjusted", "adjusted"]


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ImputeConfig(_Frozen):
    """Chained-equation imputation with predictive mean matching."""

    m_imputations: int = Field(default=5, ge=2)
    chain_iterations: int = Field(default=10, ge=1)
    pmm_donors: int = Field(default=5, ge=1)
    seed: int = Field(default=0, ge=0)
    train_only: bool = False


class SplitConfig(_Frozen):
    seed: int = Field(default=0, ge=0)
    stratified: bool = False


class PcaConfig(_Frozen):
    threshold: float = Field(default=0.95, gt=0.0, le=1.0)


class LassoConfig(_Frozen):
    """L1-penalized logistic regression with K-fold lambda selection."""

    n_folds: int = Field(default=50, ge=2)
    lambda_grid_size: int = Field(default=100, ge=2)
    lambda_min_ratio: float = Field(default=1e-3, gt=0.0, lt=1.0)
    penalize_covariates: bool = False
    tol: float = Field(default=1e-7, gt=0.0)
    max_sweeps: int = Field(default=10_000, ge=1)
    seed: int = Field(default=0, ge=0)
    criterion: Criterion = "deviance"
    global_standardize: bool = False


class RfConfig(_Frozen):
    """Random forest settings. ``mtry_fraction=None`` means sqrt(p)/p."""

    n_trees: int = Field(default=5000, ge=1)
    mtry_fraction: Optional[float] = Field(default=None, gt=0.0, le=1.0)
    max_depth: Optional[int] = Field(default=None, ge=0)
    min_leaf: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0)
    hard_vote: bool = False


class RfTuningConfig(_Frozen):
    """Two-stage cross-validated tuning grid. ``mtry_grid=None`` uses the default grid for p."""

    enabled: bool = True
    mtry_grid: Optional[List[float]] = None
    depth_grid: List[Optional[int]] = Field(default_factory=lambda: [2, 4, 8, 16, None])
    n_folds: int = Field(default=5, ge=2)
    tuning_trees: int = Field(default=200, ge=1)
    criterion: Criterion = "misclassification"


class EvalConfig(_Frozen):
    threshold: float = Field(default=0.5, ge=0.0, le=1.0)


class SynthConfig(_Frozen):
    """Synthetic cohort generator settings; defaults follow the study population."""

    n_rows: int = Field(default=1474, ge=8)
    n_metabolites: int = Field(default=256, ge=1)
    prevalence: float = Field(default=0.70, gt=0.0, lt=1.0)
    n_true_metabolites: int = Field(default=10, ge=0)
    effect_size: float = Field(default=0.35, ge=0.0)
    confounder_strength: float = Field(default=0.5, ge=0.0)
    block_structure: List[Tuple[int, float]] = Field(
        default_factory=lambda: [(40, 0.8), (30, 0.6), (30, 0.5), (20, 0.4), (20, 0.3)]
    )
    missing_rate: float = Field(default=0.02, ge=0.0, lt=1.0)
    log_scale_sd: float = Field(default=0.5, gt=0.0)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_blocks(self) -> "SynthConfig":
        for size, rho in self.block_structure:
            if size < 1:
                raise ValueError(f"block size must be positive, got {size}")
            if not 0.0 <= rho < 1.0:
                raise ValueError(f"within-block correlation must be in [0, 1), got {rho}")
        return self


class PipelineConfig(_Frozen):
    """End-to-end experiment configuration."""

    data_path: Path
    schema_path: Path
    output_dir: Path = Path("output/run")
    impute: ImputeConfig = Field(default_factory=ImputeConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
    pca: PcaConfig = Field(default_factory=PcaConfig)
    lasso: LassoConfig = Field(default_factory=LassoConfig)
    rf: RfConfig = Field(default_factory=lambda: RfConfig(n_trees=1000))
    rf_tuning: RfTuningConfig = Field(default_factory=RfTuningConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)
    variants: List[Variant] = Field(default_factory=lambda: ["unadjusted", "adjusted"])
    models: List[Literal["pca", "lasso", "rf"]] = Field(default_factory=lambda: ["pca", "lasso", "rf"])
    save_forests: bool = False
    threads: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check_lists(self) -> "PipelineConfig":
        if not self.variants:
            raise ValueError("at least one model variant is required")
        if len(set(self.variants)) != len(self.variants):
            raise ValueError("variants must be unique")
        if not self.models:
            raise ValueError("at least one model family is required")
        return self


class RuntimeSettings(BaseSettings):
    """Process-level settings read from CAD_PREDICTOR_* environment variables."""

    model_config = SettingsConfigDict(env_prefix="CAD_PREDICTOR_", extra="ignore")

    log_level: str = "INFO"
    threads: int = Field(default=1, ge=1)
