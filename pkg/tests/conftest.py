"""
Test configuration and fixtures for the CAD predictor project.

This module contains pytest configuration, common fixtures, and test utilities
used across the entire test suite: small synthetic cohorts, hand-built
cohort tables and ready-made configuration files.
"""

import os
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np
import pytest
import yaml

from cad_predictor.cohort import CohortSchema, CohortTable, write_csv
from cad_predictor.config.models import SynthConfig
from cad_predictor.synth import GroundTruth, generate

# Test data constants
TEST_SEED = 20240101
SMALL_ROWS = 160
SMALL_METABOLITES = 12


@pytest.fixture
def small_schema() -> CohortSchema:
    """
    Schema with two covariates and three metabolites.

    Returns:
        CohortSchema: Schema used by the hand-built tables
    """
    return CohortSchema(
        outcome_name="cad",
        covariate_names=("age", "sex"),
        metabolite_names=("m1", "m2", "m3"),
        id_name="participant_id",
    )


@pytest.fixture
def small_table(small_schema: CohortSchema) -> CohortTable:
    """
    A 10-row table with a few missing metabolite cells.

    Returns:
        CohortTable: Hand-built cohort table
    """
    rng = np.random.default_rng(7)
    n = 10
    values = np.column_stack(
        [
            rng.normal(60.0, 10.0, n),
            (np.arange(n) % 2).astype(float),
            rng.lognormal(0.0, 0.5, (n, 3)),
        ]
    )
    missing = np.zeros(values.shape, dtype=bool)
    missing[1, 2] = missing[4, 3] = missing[7, 4] = True
    outcome = np.array([1, 0, 1, 1, 0, 1, 0, 1, 1, 0])
    ids = np.array([f"P{i:02d}" for i in range(1, n + 1)], dtype=object)
    return CohortTable(values=values, missing=missing, outcome=outcome, schema=small_schema, ids=ids)


@pytest.fixture
def small_synth_config() -> SynthConfig:
    """
    Desk-size generator settings: a few hundred rows, a dozen metabolites.

    Returns:
        SynthConfig: Configuration with one correlated block and 3 true metabolites
    """
    return SynthConfig(
        n_rows=SMALL_ROWS,
        n_metabolites=SMALL_METABOLITES,
        n_true_metabolites=3,
        effect_size=1.0,
        block_structure=[(4, 0.6)],
        missing_rate=0.03,
        seed=TEST_SEED,
    )


@pytest.fixture
def synth_cohort(small_synth_config: SynthConfig) -> Tuple[CohortTable, GroundTruth]:
    """
    A small synthetic cohort and its ground truth.

    Returns:
        Tuple[CohortTable, GroundTruth]: Generated table and generating model
    """
    return generate(small_synth_config)


@pytest.fixture
def cohort_files(tmp_path: Path, synth_cohort: Tuple[CohortTable, GroundTruth]) -> Dict[str, Path]:
    """
    Write the synthetic cohort and its schema to disk.

    Returns:
        Dict[str, Path]: Paths keyed by ``data`` and ``schema``
    """
    table, _ = synth_cohort
    data_path = tmp_path / "data" / "cohort.csv"
    write_csv(table, data_path)
    schema_path = tmp_path / "data" / "schema.yaml"
    with open(schema_path, "w") as f:
        yaml.safe_dump(table.schema.model_dump(mode="json"), f)
    return {"data": data_path, "schema": schema_path}


@pytest.fixture
def test_config_dir(tmp_path: Path, cohort_files: Dict[str, Path]) -> Path:
    """
    Create a configuration directory with a fast pipeline settings.yaml.

    Args:
        tmp_path: Per-test temporary directory
        cohort_files: Cohort and schema written to disk

    Returns:
        Path: Path to the test config directory
    """
    config_dir = tmp_path / "config"
    config_dir.mkdir()
    settings = CohortDataFactory.create_pipeline_settings(
        data_path=str(cohort_files["data"]),
        schema_path=str(cohort_files["schema"]),
        output_dir=str(tmp_path / "output"),
    )
    with open(config_dir / "settings.yaml", "w") as f:
        yaml.safe_dump(settings, f)
    return config_dir


def pytest_configure(config):
    """Configure pytest with custom markers."""
    config.addinivalue_line("markers", "unit: mark test as a unit test (fast, isolated)")
    config.addinivalue_line("markers", "integration: mark test as an end-to-end pipeline or CLI test")
    config.addinivalue_line("markers", "slow: mark test as slow running")


# Environment setup for tests
@pytest.fixture(autouse=True)
def setup_test_environment(monkeypatch):
    """
    Automatically clear CAD_PREDICTOR_* overrides for every test.

    This fixture runs before every test so that a developer's shell
    environment never changes which configuration a test sees.
    """
    for name in list(os.environ):
        if name.startswith("CAD_PREDICTOR_"):
            monkeypatch.delenv(name, raising=False)
    monkeypatch.setenv("CAD_PREDICTOR_LOG_LEVEL", "DEBUG")


class CohortDataFactory:
    """
    Factory class for creating raw configuration mappings.

    These are the plain dictionaries a YAML file would contain, for tests
    that exercise loading and validation rather than the models themselves.
    """

    @staticmethod
    def create_pipeline_settings(**kwargs) -> Dict[str, Any]:
        """
        Create a fast end-to-end pipeline configuration.

        Args:
            **kwargs: Override default values

        Returns:
            Dict[str, Any]: Pipeline settings mapping
        """
        default_data: Dict[str, Any] = {
            "data_path": "data/cohort.csv",
            "schema_path": "data/schema.yaml",
            "output_dir": "output/run",
            "threads": 1,
            "split": {"seed": 3},
            "impute": {"m_imputations": 2, "chain_iterations": 2, "pmm_donors": 3, "seed": 5},
            "lasso": {"n_folds": 4, "lambda_grid_size": 12, "seed": 11},
            "rf": {"n_trees": 15, "seed": 13},
            "rf_tuning": {
                "enabled": True,
                "mtry_grid": [0.25, 0.5],
                "depth_grid": [2, None],
                "n_folds": 3,
                "tuning_trees": 5,
            },
        }
        default_data.update(kwargs)
        return default_data

    @staticmethod
    def create_schema_data(**kwargs) -> Dict[str, Any]:
        """
        Create a cohort schema mapping.

        Args:
            **kwargs: Override default values

        Returns:
            Dict[str, Any]: Schema mapping
        """
        default_data: Dict[str, Any] = {
            "outcome_name": "cad",
            "covariate_names": ["age", "sex"],
            "metabolite_names": ["m1", "m2", "m3"],
            "id_name": "participant_id",
        }
        default_data.update(kwargs)
        return default_data


@pytest.fixture
def cohort_data_factory() -> CohortDataFactory:
    """
    Provide the raw configuration factory.

    Returns:
        CohortDataFactory: Factory instance for creating config mappings
    """
    return CohortDataFactory()
