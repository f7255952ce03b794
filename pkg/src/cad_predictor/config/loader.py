"""Configuration loading and management.

This module handles loading the pipeline configuration and cohort schema
from YAML (or JSON) files and environment variables, with validation and
error handling.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml
from pydantic import ValidationError

from cad_predictor.cohort import CohortSchema
from cad_predictor.config.models import PipelineConfig
from cad_predictor.core.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

# Default configuration file path
DEFAULT_CONFIG_PATH = Path("configs/settings.yaml")

# Environment variable -> (section, field); section None means top level.
ENV_MAPPINGS: Dict[str, Tuple[Optional[str], str]] = {
    # Paths
    "CAD_PREDICTOR_DATA_PATH": (None, "data_path"),
    "CAD_PREDICTOR_SCHEMA_PATH": (None, "schema_path"),
    "CAD_PREDICTOR_OUTPUT_DIR": (None, "output_dir"),
    "CAD_PREDICTOR_THREADS": (None, "threads"),
    # Imputation
    "CAD_PREDICTOR_IMPUTE_M": ("impute", "m_imputations"),
    "CAD_PREDICTOR_IMPUTE_ITERATIONS": ("impute", "chain_iterations"),
    "CAD_PREDICTOR_IMPUTE_DONORS": ("impute", "pmm_donors"),
    "CAD_PREDICTOR_IMPUTE_SEED": ("impute", "seed"),
    "CAD_PREDICTOR_IMPUTE_TRAIN_ONLY": ("impute", "train_only"),
    # Split
    "CAD_PREDICTOR_SPLIT_SEED": ("split", "seed"),
    "CAD_PREDICTOR_SPLIT_STRATIFIED": ("split", "stratified"),
    # PCA
    "CAD_PREDICTOR_PCA_THRESHOLD": ("pca", "threshold"),
    # Lasso
    "CAD_PREDICTOR_LASSO_FOLDS": ("lasso", "n_folds"),
    "CAD_PREDICTOR_LASSO_GRID_SIZE": ("lasso", "lambda_grid_size"),
    "CAD_PREDICTOR_LASSO_SEED": ("lasso", "seed"),
    # Random forest
    "CAD_PREDICTOR_RF_TREES": ("rf", "n_trees"),
    "CAD_PREDICTOR_RF_SEED": ("rf", "seed"),
    "CAD_PREDICTOR_RF_TUNE": ("rf_tuning", "enabled"),
    "CAD_PREDICTOR_RF_TUNING_TREES": ("rf_tuning", "tuning_trees"),
    # Evaluation
    "CAD_PREDICTOR_EVAL_THRESHOLD": ("evaluation", "threshold"),
}

_INT_FIELDS = {
    "threads",
    "m_imputations",
    "chain_iterations",
    "pmm_donors",
    "seed",
    "n_folds",
    "lambda_grid_size",
    "n_trees",
    "tuning_trees",
}
_FLOAT_FIELDS = {"threshold"}
_BOOL_FIELDS = {"train_only", "stratified", "enabled"}


def load_config(config_path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """Load the pipeline configuration from file and environment variables.

    Args:
        config_path: Path to configuration file. If None, uses DEFAULT_CONFIG_PATH.
        overrides: Nested mapping applied last (CLI flags).

    Returns:
        Validated PipelineConfig object.

    Raises:
        ConfigurationError: If configuration loading or validation fails.
    """
    if config_path is None:
        config_path = DEFAULT_CONFIG_PATH

    config_data = _load_yaml_file(config_path)
    config_data = _apply_env_overrides(config_data)
    if overrides:
        config_data = merge_overrides(config_data, overrides)

    # Relative data paths resolve against the config file's directory.
    for key in ("data_path", "schema_path"):
        value = config_data.get(key)
        if value is not None and not Path(value).is_absolute() and not Path(value).exists():
            candidate = config_path.parent / value
            if candidate.exists():
                config_data[key] = str(candidate)

    try:
        config = PipelineConfig.model_validate(config_data)
    except ValidationError as e:
        raise ConfigurationError(
            f"Configuration validation failed: {e}",
            error_code="CONFIG_VALIDATION_FAILED",
            context={"config_path": str(config_path), "error": str(e)},
        )

    logger.debug("Loaded configuration from %s", config_path)
    return config


def load_schema(schema_path: Path) -> CohortSchema:
    """Load a cohort schema document (YAML or JSON).

    Raises:
        ConfigurationError: If the file is missing, malformed or invalid.
    """
    data = _load_yaml_file(schema_path)
    try:
        return CohortSchema.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(
            f"Schema validation failed: {e}",
            error_code="CONFIG_VALIDATION_FAILED",
            context={"config_path": str(schema_path), "error": str(e)},
        )


def merge_overrides(config_data: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge ``overrides`` into ``config_data``; None values are skipped."""
    merged = dict(config_data)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            base = merged.get(key) or {}
            merged[key] = merge_overrides(dict(base), value)
        else:
            merged[key] = value
    return merged


def _load_yaml_file(config_path: Path) -> Dict[str, Any]:
    """Load configuration from YAML file.

    Args:
        config_path: Path to YAML configuration file.

    Returns:
        Dictionary containing configuration data.

    Raises:
        ConfigurationError: If file loading fails.
    """
    try:
        if not config_path.exists():
            raise ConfigurationError(
                f"Configuration file not found: {config_path}",
                error_code="CONFIG_FILE_NOT_FOUND",
                context={"config_path": str(config_path)},
            )

        with open(config_path, "r", encoding="utf-8") as file:
            config_data = yaml.safe_load(file)

        if config_data is None:
            config_data = {}
        if not isinstance(config_data, dict):
            raise ConfigurationError(
                f"Configuration file must contain a mapping: {config_path}",
                error_code="CONFIG_VALIDATION_FAILED",
                context={"config_path": str(config_path)},
            )

        return config_data

    except yaml.YAMLError as e:
        raise ConfigurationError(
            f"Invalid YAML syntax in configuration file: {e}",
            error_code="INVALID_YAML_SYNTAX",
            context={"config_path": str(config_path), "yaml_error": str(e)},
        )
    except IOError as e:
        raise ConfigurationError(
            f"Failed to read configuration file: {e}",
            error_code="CONFIG_FILE_READ_ERROR",
            context={"config_path": str(config_path), "io_error": str(e)},
        )


def _apply_env_overrides(config_data: Dict[str, Any]) -> Dict[str, Any]:
    """Apply environment variable overrides to configuration.

    Environment variables follow CAD_PREDICTOR_SECTION_FIELD
    (e.g., CAD_PREDICTOR_IMPUTE_SEED, CAD_PREDICTOR_RF_TREES).

    Args:
        config_data: Base configuration data from file.

    Returns:
        Configuration data with environment overrides applied.
    """
    for env_var, (section, field) in ENV_MAPPINGS.items():
        env_value = os.getenv(env_var)
        if env_value is None:
            continue
        converted_value = _convert_env_value(env_value, section or "root", field)
        if section is None:
            config_data[field] = converted_value
            continue
        if not isinstance(config_data.get(section), dict):
            config_data[section] = {}
        config_data[section][field] = converted_value

    return config_data


def _convert_env_value(value: str, section: str, field: str) -> Any:
    """Convert environment variable string to appropriate type.

    Args:
        value: String value from environment variable.
        section: Configuration section name.
        field: Configuration field name.

    Returns:
        Converted value with appropriate type.
    """
    if field in _BOOL_FIELDS:
        if value.lower() not in ("true", "false", "1", "0"):
            raise ConfigurationError(
                f"Invalid boolean value for {section}.{field}: {value}",
                error_code="INVALID_ENV_VALUE_TYPE",
                context={"section": section, "field": field, "value": value},
            )
        return value.lower() in ("true", "1")

    if field in _INT_FIELDS:
        try:
            return int(value)
        except ValueError:
            raise ConfigurationError(
                f"Invalid integer value for {section}.{field}: {value}",
                error_code="INVALID_ENV_VALUE_TYPE",
                context={"section": section, "field": field, "value": value},
            )

    if field in _FLOAT_FIELDS:
        try:
            return float(value)
        except ValueError:
            raise ConfigurationError(
                f"Invalid float value for {section}.{field}: {value}",
                error_code="INVALID_ENV_VALUE_TYPE",
                context={"section": section, "field": field, "value": value},
            )

    return value


def save_config(config: PipelineConfig, config_path: Path) -> None:
    """Save configuration to YAML file.

    Args:
        config: Configuration to save.
        config_path: Path where to save the configuration.

    Raises:
        ConfigurationError: If saving fails.
    """
    try:
        config_path.parent.mkdir(parents=True, exist_ok=True)
        config_data = config.model_dump(mode="json")
        with open(config_path, "w", encoding="utf-8") as file:
            yaml.safe_dump(config_data, file, default_flow_style=False, indent=2, allow_unicode=True, sort_keys=False)

    except IOError as e:
        raise ConfigurationError(
            f"Failed to save configuration file: {e}",
            error_code="CONFIG_FILE_SAVE_ERROR",
            context={"config_path": str(config_path), "io_error": str(e)},
        )
