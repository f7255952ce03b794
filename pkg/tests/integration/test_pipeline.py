"""
End-to-end tests for the experiment pipeline.
"""

import json

import numpy as np
import pytest

from cad_predictor.config.loader import load_config
from cad_predictor.config.models import PipelineConfig
from cad_predictor.core.exceptions import CadPredictorError, PipelineStageError
from cad_predictor.pipeline import ModelPredictions, _table_order, model_name, run_pipeline
from tests.conftest import CohortDataFactory

EXPECTED_MODELS = [
    "PCA regression",
    "L1 regression",
    "Random forest",
    "PCA regression adjusted",
    "L1 regression adjusted",
    "Random forest adjusted",
]


def _config(cohort_files, output_dir, **kwargs) -> PipelineConfig:
    settings = CohortDataFactory.create_pipeline_settings(
        data_path=str(cohort_files["data"]),
        schema_path=str(cohort_files["schema"]),
        output_dir=str(output_dir),
        **kwargs,
    )
    return PipelineConfig.model_validate(settings)


@pytest.mark.integration
@pytest.mark.slow
class TestRunPipeline:
    def test_outputs(self, cohort_files, tmp_path):
        out = tmp_path / "run"

        config = _config(cohort_files, out)

        result = run_pipeline(config)

        assert list(result.reports) == EXPECTED_MODELS
        for name in [
            "config.yaml",
            "table1.csv",
            "table1.txt",
            "split.json",
            "imputed/manifest.json",
            "imputed/imp2.csv",
            "screening.csv",
            "table2.csv",
            "table2.txt",
            "roc_pca_regression.csv",
            "roc_random_forest_adjusted.csv",
            "models/l1_regression_adjusted/predictions.csv",
            "models/pca_regression/basis.json",
            "models/pca_regression/scores.csv",
            "report.json",
            "manifest.json",
        ]:
            assert (out / name).exists(), name
        assert load_config(out / "config.yaml") == config

        report = json.loads((out / "report.json").read_text())
        assert report["n_train"] + report["n_test"] == 160
        assert report["n_test"] == 40
        for model in report["models"].values():
            assert 0.0 <= model["auc"] <= 1.0
        assert set(report["best_auc"]) == {"unadjusted", "adjusted"}
        assert report["details"]["PCA regression"]["k"] >= 1
        assert "tuning" in report["details"]["Random forest"]

        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "ok"
        assert manifest["failed_stage"] is None
        assert manifest["seeds"] == {"split": 3, "impute": 5, "lasso": 11, "rf": 13}
        assert set(manifest["timings"]) == {"load", "split", "impute", "screen", "pca", "lasso", "rf", "evaluate"}

    def test_reproducible_across_reruns_and_threads(self, cohort_files, tmp_path):
        first = tmp_path / "first"
        second = tmp_path / "second"
        threaded = tmp_path / "threaded"

        run_pipeline(_config(cohort_files, first))
        run_pipeline(_config(cohort_files, second))
        run_pipeline(_config(cohort_files, threaded, threads=2))

        reference = (first / "report.json").read_bytes()
        assert (second / "report.json").read_bytes() == reference
        assert (threaded / "report.json").read_bytes() == reference
        for roc in sorted(first.glob("roc_*.csv")):
            assert (threaded / roc.name).read_bytes() == roc.read_bytes()

    def test_model_subset(self, cohort_files, tmp_path):
        config = _config(cohort_files, tmp_path / "run", models=["pca"], variants=["adjusted"])

        result = run_pipeline(config)

        assert list(result.reports) == ["PCA regression adjusted"]


@pytest.mark.integration
class TestPipelineFailures:
    def test_missing_data_recorded_in_manifest(self, cohort_files, tmp_path):
        config = _config({**cohort_files, "data": tmp_path / "absent.csv"}, tmp_path / "run")

        with pytest.raises(PipelineStageError) as exc_info:
            run_pipeline(config)

        assert exc_info.value.stage == "load"
        assert exc_info.value.error_code == "FILE_NOT_FOUND"
        manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
        assert manifest["status"] == "failed"
        assert manifest["failed_stage"] == "load"
        assert manifest["error"]["code"] == "FILE_NOT_FOUND"
        # The resolved configuration is written before any stage runs.
        assert load_config(tmp_path / "run" / "config.yaml") == config


class TestModelPredictions:
    def test_save_and_load(self, tmp_path):
        predictions = ModelPredictions(
            name="L1 regression adjusted",
            rows=np.array([4, 9, 2]),
            labels=np.array([1, 0, 1]),
            probabilities=[np.array([0.9, 0.2, 0.6]), np.array([0.8, 0.1, 0.7])],
            details={"selected_counts": [3, 4]},
        )
        predictions.save(tmp_path / "lasso")

        loaded = ModelPredictions.load(tmp_path / "lasso")

        assert loaded.name == predictions.name
        assert loaded.details == predictions.details
        np.testing.assert_array_equal(loaded.rows, predictions.rows)
        for a, b in zip(loaded.probabilities, predictions.probabilities):
            np.testing.assert_array_equal(a, b)
        assert loaded.evaluate().auc == pytest.approx(1.0)

    def test_load_missing(self, tmp_path):
        with pytest.raises(CadPredictorError) as exc_info:
            ModelPredictions.load(tmp_path)
        assert exc_info.value.error_code == "PREDICTIONS_NOT_FOUND"

    def test_table_order(self):
        def stub(name):
            return ModelPredictions(
                name=name, rows=np.array([0]), labels=np.array([1]), probabilities=[np.array([1.0])]
            )

        shuffled = [stub(model_name(f, a)) for f, a in [("rf", True), ("pca", False), ("rf", False), ("pca", True)]]

        ordered = [model.name for model in _table_order(shuffled, ["pca", "rf"])]

        assert ordered == ["PCA regression", "Random forest", "PCA regression adjusted", "Random forest adjusted"]
