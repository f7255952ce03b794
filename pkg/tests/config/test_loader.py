"""
Tests for configuration loading, environment overrides and model validation.
"""

from pathlib import Path

import pytest
import yaml
from pydantic import ValidationError

from cad_predictor.config.loader import load_config, load_schema, merge_overrides, save_config
from cad_predictor.config.models import PipelineConfig, RuntimeSettings, SynthConfig
from cad_predictor.core.exceptions import ConfigurationError
from tests.factories import PipelineConfigFactory

PROJECT_ROOT = Path(__file__).parent.parent.parent


def _write(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(data, f)
    return path


class TestLoadConfig:
    """Loading PipelineConfig from YAML files."""

    def test_loads_sections(self, tmp_path, cohort_data_factory):
        path = _write(tmp_path / "settings.yaml", cohort_data_factory.create_pipeline_settings())

        config = load_config(path)

        assert isinstance(config, PipelineConfig)
        assert config.impute.m_imputations == 2
        assert config.lasso.n_folds == 4
        assert config.rf.n_trees == 15
        assert config.rf_tuning.depth_grid == [2, None]
        assert config.pca.threshold == 0.95
        assert config.variants == ["unadjusted", "adjusted"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError) as exc_info:
            load_config(tmp_path / "absent.yaml")
        assert exc_info.value.error_code == "CONFIG_FILE_NOT_FOUND"

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "settings.yaml"
        path.write_text("impute: [1, 2\n")
        with pytest.raises(ConfigurationError) as exc_info:
            load_config(path)
        assert exc_info.value.error_code == "INVALID_YAML_SYNTAX"

    def test_non_mapping_document(self, tmp_path):
        path = tmp_path / "settings.yaml"
        path.write_text("- a\n- b\n")
        with pytest.raises(ConfigurationError) as exc_info:
            load_config(path)
        assert exc_info.value.error_code == "CONFIG_VALIDATION_FAILED"

    def test_validation_failure_carries_path(self, tmp_path, cohort_data_factory):
        settings = cohort_data_factory.create_pipeline_settings(impute={"m_imputations": 1})
        path = _write(tmp_path / "settings.yaml", settings)
        with pytest.raises(ConfigurationError) as exc_info:
            load_config(path)
        assert exc_info.value.error_code == "CONFIG_VALIDATION_FAILED"
        assert exc_info.value.context["config_path"] == str(path)

    def test_unknown_key_rejected(self, tmp_path, cohort_data_factory):
        settings = cohort_data_factory.create_pipeline_settings(lasso={"n_folds": 5, "alpha": 1.0})
        with pytest.raises(ConfigurationError):
            load_config(_write(tmp_path / "settings.yaml", settings))

    def test_relative_data_path_resolves_against_config_dir(self, tmp_path, monkeypatch, cohort_data_factory):
        config_dir = tmp_path / "project"
        (config_dir / "data").mkdir(parents=True)
        (config_dir / "data" / "cohort.csv").write_text("cad\n")
        path = _write(config_dir / "settings.yaml", cohort_data_factory.create_pipeline_settings())
        elsewhere = tmp_path / "elsewhere"
        elsewhere.mkdir()
        monkeypatch.chdir(elsewhere)

        config = load_config(path)

        assert config.data_path == config_dir / "data" / "cohort.csv"
        # The schema does not exist next to the config, so it stays as written.
        assert config.schema_path == Path("data/schema.yaml")

    def test_overrides_applied_last(self, tmp_path, cohort_data_factory, monkeypatch):
        monkeypatch.setenv("CAD_PREDICTOR_RF_TREES", "40")
        path = _write(tmp_path / "settings.yaml", cohort_data_factory.create_pipeline_settings())

        config = load_config(path, overrides={"rf": {"n_trees": 7}, "output_dir": None})

        assert config.rf.n_trees == 7
        assert config.rf.seed == 13
        assert config.output_dir == Path("output/run")

    def test_repository_settings_validate(self):
        config = load_config(PROJECT_ROOT / "configs" / "settings.yaml")
        assert config.lasso.n_folds == 50
        assert config.rf.n_trees == 1000
        assert config.rf_tuning.tuning_trees == 200

    def test_repository_synth_config_validates(self):
        with open(PROJECT_ROOT / "configs" / "synth.yaml") as f:
            config = SynthConfig.model_validate(yaml.safe_load(f))
        assert config.n_rows == 1474
        assert config.n_metabolites == 256
        assert sum(size for size, _ in config.block_structure) <= config.n_metabolites


class TestEnvironmentOverrides:
    """CAD_PREDICTOR_<SECTION>_<FIELD> variables."""

    def test_typed_overrides(self, tmp_path, monkeypatch, cohort_data_factory):
        monkeypatch.setenv("CAD_PREDICTOR_IMPUTE_SEED", "77")
        monkeypatch.setenv("CAD_PREDICTOR_SPLIT_STRATIFIED", "true")
        monkeypatch.setenv("CAD_PREDICTOR_EVAL_THRESHOLD", "0.3")
        monkeypatch.setenv("CAD_PREDICTOR_OUTPUT_DIR", str(tmp_path / "env-out"))
        path = _write(tmp_path / "settings.yaml", cohort_data_factory.create_pipeline_settings())

        config = load_config(path)

        assert config.impute.seed == 77
        assert config.split.stratified is True
        assert config.evaluation.threshold == 0.3
        assert config.output_dir == tmp_path / "env-out"

    def test_section_created_when_absent(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CAD_PREDICTOR_LASSO_FOLDS", "10")
        path = _write(tmp_path / "settings.yaml", {"data_path": "a.csv", "schema_path": "s.yaml"})
        assert load_config(path).lasso.n_folds == 10

    @pytest.mark.parametrize(
        "variable,value",
        [
            ("CAD_PREDICTOR_RF_TREES", "many"),
            ("CAD_PREDICTOR_PCA_THRESHOLD", "high"),
            ("CAD_PREDICTOR_RF_TUNE", "maybe"),
        ],
    )
    def test_bad_values_rejected(self, tmp_path, monkeypatch, cohort_data_factory, variable, value):
        monkeypatch.setenv(variable, value)
        path = _write(tmp_path / "settings.yaml", cohort_data_factory.create_pipeline_settings())
        with pytest.raises(ConfigurationError) as exc_info:
            load_config(path)
        assert exc_info.value.error_code == "INVALID_ENV_VALUE_TYPE"

    def test_runtime_settings_from_environment(self, monkeypatch):
        monkeypatch.setenv("CAD_PREDICTOR_LOG_LEVEL", "WARNING")
        monkeypatch.setenv("CAD_PREDICTOR_THREADS", "4")
        settings = RuntimeSettings()
        assert settings.log_level == "WARNING"
        assert settings.threads == 4


class TestSaveAndSchema:
    def test_save_then_load_round_trips(self, tmp_path):
        config = PipelineConfigFactory(data_path=str(tmp_path / "c.csv"), schema_path=str(tmp_path / "s.yaml"))
        path = tmp_path / "saved" / "settings.yaml"

        save_config(config, path)

        assert load_config(path) == config

    def test_load_schema(self, tmp_path, cohort_data_factory):
        schema = load_schema(_write(tmp_path / "schema.yaml", cohort_data_factory.create_schema_data()))
        assert schema.feature_names == ("age", "sex", "m1", "m2", "m3")
        assert schema.id_name == "participant_id"

    def test_schema_duplicates_rejected(self, tmp_path, cohort_data_factory):
        data = cohort_data_factory.create_schema_data(metabolite_names=["m1", "age"])
        with pytest.raises(ConfigurationError) as exc_info:
            load_schema(_write(tmp_path / "schema.yaml", data))
        assert exc_info.value.error_code == "CONFIG_VALIDATION_FAILED"

    def test_json_schema_accepted(self, tmp_path):
        path = tmp_path / "schema.json"
        path.write_text('{"outcome_name": "cad", "metabolite_names": ["m1"]}')
        assert load_schema(path).covariate_names == ()


class TestMergeOverrides:
    def test_nested_merge_skips_none(self):
        merged = merge_overrides({"rf": {"n_trees": 5, "seed": 1}, "threads": 2}, {"rf": {"seed": 9}, "threads": None})
        assert merged == {"rf": {"n_trees": 5, "seed": 9}, "threads": 2}

    def test_original_untouched(self):
        base = {"rf": {"seed": 1}}
        merge_overrides(base, {"rf": {"seed": 2}})
        assert base == {"rf": {"seed": 1}}


class TestModelValidation:
    def test_block_correlation_must_be_below_one(self):
        with pytest.raises(ValidationError):
            SynthConfig(block_structure=[(4, 1.0)])

    def test_variants_unique(self):
        with pytest.raises(ValidationError):
            PipelineConfig(data_path="a", schema_path="b", variants=["adjusted", "adjusted"])

    def test_models_non_empty(self):
        with pytest.raises(ValidationError):
            PipelineConfig(data_path="a", schema_path="b", models=[])

    def test_configs_are_frozen(self):
        config = SynthConfig()
        with pytest.raises(ValidationError):
            config.seed = 3
