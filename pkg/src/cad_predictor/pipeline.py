"""End-to-end experiment: load, split, impute, fit every model family, evaluate.

Each stage writes its artifacts under the run's output directory. The
manifest records seeds, the config hash, stage timings and, on failure, the
failing stage; ``report.json`` holds only results so reruns with an equal
config reproduce it byte for byte.
"""

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from cad_predictor import __version__
from cad_predictor.cohort import CohortTable, SplitIndices, load_csv, summarize, train_test_split
from cad_predictor.config.loader import load_schema, save_config
from cad_predictor.config.models import LassoConfig, PcaConfig, PipelineConfig, RfConfig, RfTuningConfig
from cad_predictor.core.exceptions import (
    CadPredictorError,
    DataValidationError,
    MissingColumnError,
    NonBinaryOutcomeError,
    PipelineStageError,
)
from cad_predictor.core.rng import stable_hash
from cad_predictor.evalx import EvalReport, emit_table2, evaluate_pooled
from cad_predictor.forest import fit_forest, importance, tune_two_stage
from cad_predictor.glm import fit_factor_models, screen_metabolites
from cad_predictor.impute import ImputedSet, mice_pmm
from cad_predictor.lasso import lasso_across_imputations
from cad_predictor.transform import (
    PcaBasis,
    factor_composition,
    fit_standardizer,
    log1p_matrix,
    pca_fit,
    pca_project,
)

logger = logging.getLogger(__name__)

MODEL_LABELS = {"pca": "PCA regression", "lasso": "L1 regression", "rf": "Random forest"}
MANIFEST_NAME = "manifest.json"
REPORT_NAME = "report.json"
PREDICTIONS_NAME = "predictions.csv"
MODEL_INFO_NAME = "model.json"
RESOLVED_CONFIG_NAME = "config.yaml"
BASIS_NAME = "basis.json"
SCORES_NAME = "scores.csv"


def model_name(family: str, adjusted: bool) -> str:
    label = MODEL_LABELS[family]
    return f"{label} adjusted" if adjusted else label


def _write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class ModelPredictions:
    """Per-imputation test-set probabilities of one fitted model."""

    name: str
    rows: np.ndarray
    labels: np.ndarray
    probabilities: List[np.ndarray]
    details: Dict[str, Any] = field(default_factory=dict)

    def evaluate(self, threshold: float = 0.5) -> EvalReport:
        return evaluate_pooled(self.probabilities, self.labels, threshold)

    def relabel(self, labels: Mapping[int, int]) -> "ModelPredictions":
        """Replace the stored labels with ``labels[row]`` for every predicted row.

        Raises:
            DataValidationError: If a predicted row has no label.
        """
        absent = [int(row) for row in self.rows if int(row) not in labels]
        if absent:
            raise DataValidationError(
                f"{self.name}: {len(absent)} predicted rows have no label",
                error_code="LABELS_MISSING_ROWS",
                context={"model": self.name, "rows": absent[:20]},
            )
        relabelled = np.array([labels[int(row)] for row in self.rows], dtype=np.int64)
        changed = int((relabelled != self.labels).sum())
        if changed:
            logger.warning("%s: %d stored labels differ from the labels file", self.name, changed)
        return replace(self, labels=relabelled)

    def save(self, directory: Union[str, Path]) -> None:
        """Write ``predictions.csv`` (row, label, imp1..impM) and ``model.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame({"row": self.rows, "label": self.labels})
        for k, probs in enumerate(self.probabilities, start=1):
            frame[f"imp{k}"] = probs
        frame.to_csv(directory / PREDICTIONS_NAME, index=False, float_format="%.17g")
        _write_json(directory / MODEL_INFO_NAME, {"name": self.name, "details": self.details})

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "ModelPredictions":
        directory = Path(directory)
        info_path = directory / MODEL_INFO_NAME
        predictions_path = directory / PREDICTIONS_NAME
        if not info_path.exists() or not predictions_path.exists():
            raise CadPredictorError(
                f"No model predictions in {directory}",
                error_code="PREDICTIONS_NOT_FOUND",
                context={"directory": str(directory)},
            )
        info = json.loads(info_path.read_text(encoding="utf-8"))
        frame = pd.read_csv(predictions_path)
        columns = sorted((c for c in frame.columns if c.startswith("imp")), key=lambda c: int(c[3:]))
        return cls(
            name=info["name"],
            rows=frame["row"].to_numpy(dtype=np.intp),
            labels=frame["label"].to_numpy(dtype=np.int64),
            probabilities=[frame[c].to_numpy(dtype=np.float64) for c in columns],
            details=info.get("details", {}),
        )


def fit_pca_basis(table: CohortTable, rows: Sequence[int], config: Optional[PcaConfig] = None) -> PcaBasis:
    """Standardize the log1p metabolites of ``rows`` and fit the PCA basis on them."""
    config = config or PcaConfig()
    index = np.asarray(rows)
    logged = log1p_matrix(table.metabolites)
    standardizer = fit_standardizer(logged[index], column_names=table.schema.metabolite_names)
    return pca_fit(standardizer.apply(logged[index]), standardizer=standardizer, threshold=config.threshold)


def save_pca_basis(basis: PcaBasis, table: CohortTable, directory: Union[str, Path]) -> None:
    """Write ``basis.json`` and the factor scores of every row of ``table`` to ``scores.csv``."""
    directory = Path(directory)
    basis.save(directory / BASIS_NAME)
    scores = pca_project(basis, log1p_matrix(table.metabolites))
    frame = pd.DataFrame(scores, columns=[f"factor{i}" for i in range(1, basis.k_selected + 1)])
    frame.insert(0, "row", np.arange(table.n_rows))
    if table.ids is not None:
        frame.insert(1, table.schema.id_name or "id", table.ids)
    frame.to_csv(directory / SCORES_NAME, index=False, float_format="%.17g")


def predict_pca(
    imputed: ImputedSet,
    split: SplitIndices,
    adjusted: bool,
    config: Optional[PcaConfig] = None,
    save_dir: Optional[Path] = None,
) -> ModelPredictions:
    """PCA factors of log1p metabolites, then logistic regression on all k factors.

    Standardization and PCA are fitted on the training rows of each
    imputation; k is chosen on the first and kept for the rest. With
    ``save_dir`` the first imputation's basis and scores are written there.
    """
    config = config or PcaConfig()
    train, test = np.asarray(split.train), np.asarray(split.test)
    names = imputed.schema.metabolite_names
    probabilities = []
    k = None
    details: Dict[str, Any] = {}
    for index, table in enumerate(imputed.tables):
        logged = log1p_matrix(table.metabolites)
        basis = fit_pca_basis(table, train, config)
        if k is None:
            k = basis.k_selected
            details["k"] = k
            details["explained_fraction"] = float(basis.explained_fraction[:k].sum())
            details["composition"] = factor_composition(basis, names, k=k)
        basis = basis.with_selection(k)
        if index == 0 and save_dir is not None:
            save_pca_basis(basis, table, save_dir)
        covariates = table.covariates
        models = fit_factor_models(
            pca_project(basis, logged[train]), table.outcome[train], covariates[train], adjusted=adjusted
        )
        if index == 0:
            details["factor_models"] = json.loads(models.to_frame().to_json(orient="records"))
        probabilities.append(models.predict_proba(pca_project(basis, logged[test]), covariates[test]))
    first = imputed.tables[0]
    return ModelPredictions(
        name=model_name("pca", adjusted),
        rows=test,
        labels=first.outcome[test].astype(np.int64),
        probabilities=probabilities,
        details=details,
    )


def predict_lasso(
    imputed: ImputedSet,
    split: SplitIndices,
    adjusted: bool,
    config: Optional[LassoConfig] = None,
    n_jobs: int = 1,
) -> ModelPredictions:
    """Cross-validated lasso per imputation, predicting the test rows."""
    config = config or LassoConfig()
    test = np.asarray(split.test)
    report = lasso_across_imputations(imputed, config, adjusted, rows=split.train, n_jobs=n_jobs)
    probabilities = [
        fit.predict_proba(table.features(adjusted)[test]) for fit, table in zip(report.fits, imputed.tables)
    ]
    return ModelPredictions(
        name=model_name("lasso", adjusted),
        rows=test,
        labels=imputed.tables[0].outcome[test].astype(np.int64),
        probabilities=probabilities,
        details=report.to_dict(),
    )


def predict_forest(
    imputed: ImputedSet,
    split: SplitIndices,
    adjusted: bool,
    config: Optional[RfConfig] = None,
    tuning: Optional[RfTuningConfig] = None,
    n_jobs: int = 1,
    save_dir: Optional[Path] = None,
) -> ModelPredictions:
    """Random forest per imputation; tuning (when enabled) runs once on the first table."""
    config = config or RfConfig()
    tuning = tuning or RfTuningConfig()
    train, test = np.asarray(split.train), np.asarray(split.test)
    schema = imputed.schema
    names = tuple(schema.metabolite_names) + (tuple(schema.covariate_names) if adjusted else ())
    details: Dict[str, Any] = {}

    if tuning.enabled:
        first = imputed.tables[0]
        result = tune_two_stage(first.features(adjusted)[train], first.outcome[train], config, tuning, n_jobs)
        config = result.config
        details["tuning"] = result.to_dict()
    details["config"] = config.model_dump(mode="json")

    probabilities = []
    importances = []
    for k, table in enumerate(imputed.tables, start=1):
        X = table.features(adjusted)
        forest = fit_forest(X[train], table.outcome[train], config, feature_names=names, n_jobs=n_jobs)
        probabilities.append(forest.predict_proba(X[test]))
        importances.append(importance(forest))
        if save_dir is not None:
            forest.save(Path(save_dir) / f"forest_imp{k}.json")
    mean_importance = np.mean(importances, axis=0)
    ranking = np.argsort(-mean_importance, kind="stable")
    details["importance"] = [{"name": names[j], "importance": float(mean_importance[j])} for j in ranking]
    return ModelPredictions(
        name=model_name("rf", adjusted),
        rows=test,
        labels=imputed.tables[0].outcome[test].astype(np.int64),
        probabilities=probabilities,
        details=details,
    )


@dataclass
class RunState:
    """Mutable bookkeeping for one run; serialized into the manifest."""

    config: PipelineConfig
    timings: Dict[str, float] = field(default_factory=dict)
    failed_stage: Optional[str] = None
    error: Optional[Dict[str, Any]] = None

    def manifest(self) -> Dict[str, Any]:
        config = self.config.model_dump(mode="json")
        return {
            "version": __version__,
            "config": config,
            "config_hash": stable_hash(config),
            "seeds": {
                "split": self.config.split.seed,
                "impute": self.config.impute.seed,
                "lasso": self.config.lasso.seed,
                "rf": self.config.rf.seed,
            },
            "timings": self.timings,
            "status": "failed" if self.failed_stage else "ok",
            "failed_stage": self.failed_stage,
            "error": self.error,
        }


@contextmanager
def _stage(state: RunState, name: str) -> Iterator[None]:
    logger.info("Stage %s started", name)
    started = time.perf_counter()
    try:
        yield
    except PipelineStageError:
        raise
    except Exception as e:
        state.failed_stage = name
        error = PipelineStageError(name, e)
        state.error = {"code": error.error_code, "message": str(e)}
        raise error from e
    finally:
        state.timings[name] = round(time.perf_counter() - started, 6)
    logger.info("Stage %s finished in %.2fs", name, state.timings[name])


@dataclass(frozen=True)
class RunResult:
    output_dir: Path
    report: Dict[str, Any]
    reports: Dict[str, EvalReport]


def run_pipeline(config: PipelineConfig) -> RunResult:
    """Run the full experiment described by ``config``.

    Raises:
        PipelineStageError: Naming the stage that failed; the manifest is
            written before the error propagates.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / RESOLVED_CONFIG_NAME)
    state = RunState(config=config)
    threads = config.threads
    try:
        with _stage(state, "load"):
            table = load_table(config.data_path, config.schema_path)
            summary = summarize(table)
            summary.to_frame().to_csv(out / "table1.csv", index=False, float_format="%.17g")
            (out / "table1.txt").write_text(summary.format(), encoding="utf-8")

        with _stage(state, "split"):
            split = train_test_split(table, config.split.seed, config.split.stratified)
            split.save(out / "split.json")

        with _stage(state, "impute"):
            fit_rows = split.train if config.impute.train_only else None
            imputed = mice_pmm(table, config.impute, fit_rows=fit_rows, n_jobs=threads)
            imputed.save(out / "imputed")

        variants = [variant == "adjusted" for variant in config.variants]
        with _stage(state, "screen"):
            frames = []
            screening_summary = {}
            for adjusted in variants:
                result = screen_metabolites(imputed, adjusted, rows=split.train, n_jobs=threads)
                frame = result.to_frame()
                frame.insert(0, "variant", "adjusted" if adjusted else "unadjusted")
                frames.append(frame.drop(columns=["adjusted"]))
                screening_summary["adjusted" if adjusted else "unadjusted"] = {
                    "n_tests": result.n_tests,
                    "threshold": result.threshold,
                    "significant": result.significant,
                }
            pd.concat(frames, ignore_index=True).to_csv(out / "screening.csv", index=False, float_format="%.17g")

        predictions: List[ModelPredictions] = []
        if "pca" in config.models:
            with _stage(state, "pca"):
                for adjusted in variants:
                    model_dir = out / "models" / _directory_name(model_name("pca", adjusted))
                    predictions.append(predict_pca(imputed, split, adjusted, config.pca, model_dir))
        if "lasso" in config.models:
            with _stage(state, "lasso"):
                for adjusted in variants:
                    predictions.append(predict_lasso(imputed, split, adjusted, config.lasso, threads))
        if "rf" in config.models:
            with _stage(state, "rf"):
                for adjusted in variants:
                    forest_dir = out / "forests" / ("adjusted" if adjusted else "unadjusted")
                    predictions.append(
                        predict_forest(
                            imputed,
                            split,
                            adjusted,
                            config.rf,
                            config.rf_tuning,
                            threads,
                            forest_dir if config.save_forests else None,
                        )
                    )

        with _stage(state, "evaluate"):
            predictions = _table_order(predictions, config.models)
            reports = {}
            for model in predictions:
                model.save(out / "models" / _directory_name(model.name))
                reports[model.name] = model.evaluate(config.evaluation.threshold)
            table2 = emit_table2(reports, out)
            report = {
                "n_train": len(split.train),
                "n_test": len(split.test),
                "models": {name: r.to_dict() for name, r in reports.items()},
                "best_auc": table2.best,
                "screening": screening_summary,
                "details": {model.name: model.details for model in predictions},
            }
            _write_json(out / REPORT_NAME, report)
    finally:
        _write_json(out / MANIFEST_NAME, state.manifest())

    logger.info("Run complete: %d models evaluated, outputs in %s", len(reports), out)
    return RunResult(output_dir=out, report=report, reports=reports)


def _directory_name(name: str) -> str:
    return name.lower().replace(" ", "_")


def _table_order(predictions: Sequence[ModelPredictions], families: Sequence[str]) -> List[ModelPredictions]:
    """Unadjusted block first, then adjusted; families in configured order within each block."""
    labels = [MODEL_LABELS[family] for family in families]

    def key(model: ModelPredictions) -> tuple:
        adjusted = model.name.endswith(" adjusted")
        base = model.name[: -len(" adjusted")] if adjusted else model.name
        return (adjusted, labels.index(base))

    return sorted(predictions, key=key)


def load_table(data_path: Union[str, Path], schema_path: Union[str, Path]) -> CohortTable:
    """Read a cohort CSV validated against a schema file."""
    return load_csv(data_path, load_schema(Path(schema_path)))


def read_labels(path: Union[str, Path]) -> Dict[int, int]:
    """Read a ``row,label`` CSV (the layout ``split`` writes to ``test.csv``).

    Raises:
        DataValidationError: If the file is missing, lacks a column or has a non-binary label.
    """
    path = Path(path)
    if not path.exists():
        raise DataValidationError(
            f"Labels file not found: {path}", error_code="FILE_NOT_FOUND", context={"path": str(path)}
        )
    frame = pd.read_csv(path)
    for column in ("row", "label"):
        if column not in frame.columns:
            raise MissingColumnError(column)
    for index, value in enumerate(frame["label"], start=1):
        if value not in (0, 1):
            raise NonBinaryOutcomeError(index, str(value))
    return {int(row): int(label) for row, label in zip(frame["row"], frame["label"])}


def write_labels(table: CohortTable, rows: Sequence[int], path: Union[str, Path]) -> None:
    """Write the outcome of ``rows`` as a ``row,label`` CSV."""
    index = np.asarray(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"row": index, "label": table.outcome[index].astype(np.int64)}).to_csv(path, index=False)
