"""
Qualitative behaviour of the full pipeline on reduced-scale synthetic cohorts.

A confounded cohort at 70% prevalence should favour the adjusted models and
yield sensitivities above specificities; a pure-noise cohort should give
chance-level AUCs and no Bonferroni hits.
"""

from pathlib import Path
from typing import Any, Dict

import numpy as np
import pytest
import yaml

from cad_predictor.cohort import write_csv
from cad_predictor.config.models import ImputeConfig, PipelineConfig, SynthConfig
from cad_predictor.glm import screen_metabolites
from cad_predictor.impute import mice_pmm
from cad_predictor.pipeline import RunResult, model_name, run_pipeline
from cad_predictor.synth import generate
from tests.conftest import CohortDataFactory

FAMILIES = ["pca", "lasso", "rf"]

# Large shared blocks keep the covariate signal only partly recoverable from metabolites.
CONFOUNDED = SynthConfig(
    n_rows=1000,
    n_metabolites=40,
    n_true_metabolites=5,
    effect_size=0.35,
    confounder_strength=2.0,
    block_structure=[(20, 0.9), (20, 0.9)],
    missing_rate=0.02,
    seed=21,
)

NULL = SynthConfig(
    n_rows=1600,
    n_metabolites=40,
    n_true_metabolites=0,
    confounder_strength=0.0,
    prevalence=0.5,
    block_structure=[(10, 0.6)],
    missing_rate=0.01,
    seed=22,
)


def _run(synth: SynthConfig, directory: Path) -> RunResult:
    table, _ = generate(synth)
    data_path = directory / "data" / "cohort.csv"
    write_csv(table, data_path)
    schema_path = directory / "data" / "schema.yaml"
    with open(schema_path, "w") as f:
        yaml.safe_dump(table.schema.model_dump(mode="json"), f)

    overrides: Dict[str, Any] = {
        "lasso": {"n_folds": 5, "lambda_grid_size": 20, "seed": 11},
        "rf": {"n_trees": 60, "seed": 13},
        "rf_tuning": {"enabled": False},
    }
    settings = CohortDataFactory.create_pipeline_settings(
        data_path=str(data_path),
        schema_path=str(schema_path),
        output_dir=str(directory / "run"),
        **overrides,
    )
    return run_pipeline(PipelineConfig.model_validate(settings))


@pytest.fixture(scope="module")
def confounded_run(tmp_path_factory) -> RunResult:
    return _run(CONFOUNDED, tmp_path_factory.mktemp("confounded"))


@pytest.fixture(scope="module")
def null_run(tmp_path_factory) -> RunResult:
    return _run(NULL, tmp_path_factory.mktemp("null"))


@pytest.mark.integration
@pytest.mark.slow
class TestConfoundedCohort:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_adjustment_raises_auc(self, confounded_run, family):
        unadjusted = confounded_run.reports[model_name(family, False)]
        adjusted = confounded_run.reports[model_name(family, True)]

        assert adjusted.auc > unadjusted.auc, (family, unadjusted.auc, adjusted.auc)

    def test_sensitivity_exceeds_specificity(self, confounded_run):
        assert len(confounded_run.reports) == 6
        for name, report in confounded_run.reports.items():
            assert report.threshold == 0.5
            assert report.sensitivity > report.specificity, (name, report.sensitivity, report.specificity)


@pytest.mark.integration
@pytest.mark.slow
class TestNullCohort:
    def test_auc_at_chance(self, null_run):
        assert len(null_run.reports) == 6
        for name, report in null_run.reports.items():
            assert 0.4 <= report.auc <= 0.6, (name, report.auc)

    def test_no_bonferroni_hits(self, null_run):
        screening = null_run.report["screening"]

        assert set(screening) == {"unadjusted", "adjusted"}
        for variant, summary in screening.items():
            assert summary["n_tests"] == 40
            assert summary["threshold"] == pytest.approx(0.05 / 40)
            assert summary["significant"] == [], variant

    def test_screening_stays_quiet_across_seeds(self):
        flagged_seeds = {"unadjusted": 0, "adjusted": 0}
        p_values = []
        for seed in range(10):
            synth = NULL.model_copy(update={"n_rows": 300, "n_metabolites": 64, "missing_rate": 0.0, "seed": 40 + seed})
            table, _ = generate(synth)
            imputed = mice_pmm(table, ImputeConfig(m_imputations=2, seed=seed))
            for adjusted in (False, True):
                result = screen_metabolites(imputed, adjusted)
                assert result.threshold == pytest.approx(0.05 / 64)
                flagged_seeds["adjusted" if adjusted else "unadjusted"] += bool(result.significant)
                p_values.extend(record.p_value for record in result.records)

        assert all(count <= 1 for count in flagged_seeds.values()), flagged_seeds
        # Null p-values are close to uniform.
        assert 0.02 < np.mean(np.asarray(p_values) < 0.05) < 0.09
