"""Command-line interface.

Every stage of the experiment is a subcommand that reads the files written
by earlier stages, so a run can be resumed or inspected at any point;
``run`` executes all of them from a single config file.
"""

import functools
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence

import click
import pandas as pd
import yaml

from cad_predictor.cohort import (
    CohortSchema,
    CohortTable,
    SplitIndices,
    load_csv,
    summarize,
    train_test_split,
    write_csv,
)
from cad_predictor.config.loader import DEFAULT_CONFIG_PATH, load_config
from cad_predictor.config.models import (
    ImputeConfig,
    LassoConfig,
    PcaConfig,
    RfConfig,
    RfTuningConfig,
    RuntimeSettings,
    SynthConfig,
)
from cad_predictor.core.exceptions import (
    CadPredictorError,
    ConfigurationError,
    DataValidationError,
    PipelineStageError,
)
from cad_predictor.core.logging import configure_logging
from cad_predictor.evalx import emit_table2
from cad_predictor.glm import screen_metabolites
from cad_predictor.impute import MANIFEST_NAME as IMPUTE_MANIFEST_NAME
from cad_predictor.impute import ImputedSet, mice_pmm
from cad_predictor.pipeline import (
    ModelPredictions,
    fit_pca_basis,
    load_table,
    predict_forest,
    predict_lasso,
    predict_pca,
    read_labels,
    run_pipeline,
    save_pca_basis,
    write_labels,
)
from cad_predictor.synth import generate

logger = logging.getLogger(__name__)


def _fail(stage: str, error: CadPredictorError) -> None:
    if isinstance(error, PipelineStageError):
        stage, message = error.stage, str(error.cause)
    else:
        message = str(error)
    click.echo(f"error [{stage}] {error.error_code}: {message}", err=True)
    sys.exit(1)


def stage_command(stage: str) -> Callable[[Callable[..., Any]], Callable[..., Any]]:
    """Turn package errors raised by a command into a tagged diagnostic and exit code 1."""

    def decorator(func: Callable[..., Any]) -> Callable[..., Any]:
        @functools.wraps(func)
        def wrapper(*args: Any, **kwargs: Any) -> Any:
            try:
                return func(*args, **kwargs)
            except CadPredictorError as e:
                _fail(stage, e)

        return wrapper

    return decorator


def _seed(ctx: click.Context, seed: Optional[int], default: int = 0) -> int:
    if seed is not None:
        return seed
    return ctx.obj["seed"] if ctx.obj.get("seed") is not None else default


def _threads(ctx: click.Context) -> int:
    threads = ctx.obj.get("threads")
    return int(threads) if threads is not None else RuntimeSettings().threads


def _out(ctx: click.Context, out: Optional[Path], default: str) -> Path:
    if out is not None:
        return out
    return ctx.obj["out"] if ctx.obj.get("out") is not None else Path(default)


def _read_mapping(path: Optional[Path]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigurationError(f"Cannot read {path}: {e}", error_code="CONFIG_FILE_READ_ERROR")
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path} must contain a mapping", error_code="CONFIG_VALIDATION_FAILED")
    return data


def _validated(model: Any, data: Dict[str, Any]) -> Any:
    try:
        return model.model_validate(data)
    except ValueError as e:
        raise ConfigurationError(f"Invalid {model.__name__}: {e}", error_code="CONFIG_VALIDATION_FAILED")


def _load_split(path: Optional[Path], imputed: ImputedSet) -> SplitIndices:
    if path is not None:
        return SplitIndices.load(path)
    n = imputed.tables[0].n_rows
    logger.warning("No --split given; all %d rows are used for both fitting and evaluation", n)
    return SplitIndices(train=tuple(range(n)), test=tuple(range(n)), seed=0)


@click.group()
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None, help="Pipeline config file.")
@click.option("--seed", type=int, default=None, help="Seed for every randomized stage.")
@click.option("--threads", type=click.IntRange(min=1), default=None, help="Worker cap; never changes results.")
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Default output location.")
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR.")
@click.pass_context
def cli(
    ctx: click.Context,
    config_path: Optional[Path],
    seed: Optional[int],
    threads: Optional[int],
    out: Optional[Path],
    log_level: Optional[str],
) -> None:
    """Predict coronary artery disease from metabolomic cohort tables."""
    configure_logging(log_level)
    ctx.ensure_object(dict)
    ctx.obj.update({"config_path": config_path, "seed": seed, "threads": threads, "out": out})


@cli.command()
@click.option("--config", "synth_config", type=click.Path(exists=True, path_type=Path), help="SynthConfig YAML/JSON.")
@click.option("--rows", type=int, default=None)
@click.option("--metabolites", type=int, default=None)
@click.option("--prevalence", type=float, default=None)
@click.option("--confounder-strength", type=float, default=None)
@click.option("--true-metabolites", type=int, default=None)
@click.option("--missing-rate", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Cohort CSV path.")
@click.option("--truth", type=click.Path(path_type=Path), default=None, help="Ground-truth JSON path.")
@click.pass_context
@stage_command("synth")
def synth(
    ctx: click.Context,
    synth_config: Optional[Path],
    rows: Optional[int],
    metabolites: Optional[int],
    prevalence: Optional[float],
    confounder_strength: Optional[float],
    true_metabolites: Optional[int],
    missing_rate: Optional[float],
    seed: Optional[int],
    out: Optional[Path],
    truth: Optional[Path],
) -> None:
    """Generate a synthetic cohort with its schema and ground truth."""
    data = _read_mapping(synth_config)
    flags = {
        "n_rows": rows,
        "n_metabolites": metabolites,
        "prevalence": prevalence,
        "confounder_strength": confounder_strength,
        "n_true_metabolites": true_metabolites,
        "missing_rate": missing_rate,
        "seed": _seed(ctx, seed, data.get("seed", 0)),
    }
    data.update({key: value for key, value in flags.items() if value is not None})
    config = _validated(SynthConfig, data)

    cohort_path = _out(ctx, out, "cohort.csv")
    if cohort_path.suffix.lower() != ".csv":
        cohort_path = cohort_path / "cohort.csv"
    table, ground_truth = generate(config)
    write_csv(table, cohort_path)
    ground_truth.save(truth or cohort_path.with_name("truth.json"))
    schema_path = cohort_path.with_name("schema.json")
    schema_path.write_text(json.dumps(table.schema.model_dump(mode="json"), indent=2), encoding="utf-8")
    click.echo(f"Wrote {table.n_rows} rows to {cohort_path} (prevalence {ground_truth.prevalence:.3f})")


@cli.command()
@click.option("--data", type=click.Path(path_type=Path), required=True)
@click.option("--schema", "schema_path", type=click.Path(path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Summary CSV path.")
@stage_command("load")
def load(data: Path, schema_path: Path, out: Optional[Path]) -> None:
    """Validate a cohort file and print its Table-1 summary."""
    table = load_table(data, schema_path)
    summary = summarize(table)
    click.echo(summary.format())
    click.echo(f"missing cells: {int(table.missing.sum())}")
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        summary.to_frame().to_csv(out, index=False)


@cli.command()
@click.option("--data", type=click.Path(path_type=Path), required=True)
@click.option("--schema", "schema_path", type=click.Path(path_type=Path), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--stratified/--no-stratified", default=False)
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Split JSON path.")
@click.pass_context
@stage_command("split")
def split(
    ctx: click.Context, data: Path, schema_path: Path, seed: Optional[int], stratified: bool, out: Optional[Path]
) -> None:
    """Split rows 3:1 into train and test."""
    table = load_table(data, schema_path)
    indices = train_test_split(table, _seed(ctx, seed), stratified)
    path = _out(ctx, out, "split.json")
    indices.save(path)
    labels_path = path.with_name("test.csv")
    write_labels(table, indices.test, labels_path)
    click.echo(f"train {len(indices.train)} / test {len(indices.test)} -> {path}, {labels_path}")


@cli.command()
@click.option("--data", type=click.Path(path_type=Path), required=True)
@click.option("--schema", "schema_path", type=click.Path(path_type=Path), required=True)
@click.option("--m", "m_imputations", type=int, default=5, show_default=True)
@click.option("--iters", "--iterations", "iterations", type=int, default=10, show_default=True)
@click.option("--donors", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--split", "split_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--train-only", is_flag=True, help="Fit regressions and donor pools on training rows only.")
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Output directory.")
@click.pass_context
@stage_command("impute")
def impute(
    ctx: click.Context,
    data: Path,
    schema_path: Path,
    m_imputations: int,
    iterations: int,
    donors: int,
    seed: Optional[int],
    split_path: Optional[Path],
    train_only: bool,
    out: Optional[Path],
) -> None:
    """Impute missing cells M times by chained equations with PMM."""
    table = load_table(data, schema_path)
    config = _validated(
        ImputeConfig,
        {
            "m_imputations": m_imputations,
            "chain_iterations": iterations,
            "pmm_donors": donors,
            "seed": _seed(ctx, seed),
            "train_only": train_only,
        },
    )
    fit_rows: Optional[Sequence[int]] = None
    if train_only:
        if split_path is None:
            raise ConfigurationError("--train-only needs --split", error_code="CONFIG_VALIDATION_FAILED")
        fit_rows = SplitIndices.load(split_path).train
    imputed = mice_pmm(table, config, fit_rows=fit_rows, n_jobs=_threads(ctx))
    directory = _out(ctx, out, "imputed")
    imputed.save(directory)
    click.echo(f"Wrote {imputed.m} imputed tables to {directory}")


@cli.command()
@click.option("--imputed", "imputed_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--split", "split_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--adjusted", is_flag=True)
@click.option("--alpha", type=float, default=0.05, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Screening CSV path.")
@click.pass_context
@stage_command("screen")
def screen(
    ctx: click.Context,
    imputed_dir: Path,
    split_path: Optional[Path],
    adjusted: bool,
    alpha: float,
    out: Optional[Path],
) -> None:
    """Per-metabolite logistic screening with Bonferroni correction."""
    imputed = ImputedSet.load(imputed_dir)
    rows = SplitIndices.load(split_path).train if split_path is not None else None
    result = screen_metabolites(imputed, adjusted, rows=rows, alpha=alpha, n_jobs=_threads(ctx))
    path = _out(ctx, out, "screening.csv")
    result.save_csv(path)
    click.echo(f"{len(result.significant)} of {result.n_tests} metabolites below {result.threshold:.4g} -> {path}")


def _completed_table(data: Path, schema_path: Optional[Path]) -> CohortTable:
    """One completed table; the schema defaults to the imputation manifest beside it."""
    if schema_path is None:
        manifest = data.parent / IMPUTE_MANIFEST_NAME
        if not manifest.exists():
            raise ConfigurationError(
                f"--data {data} needs --schema (no {IMPUTE_MANIFEST_NAME} beside it)",
                error_code="CONFIG_FILE_NOT_FOUND",
                context={"path": str(manifest)},
            )
        schema = _validated(CohortSchema, json.loads(manifest.read_text(encoding="utf-8"))["schema"])
        table = load_csv(data, schema)
    else:
        table = load_table(data, schema_path)
    if table.has_missing:
        raise DataValidationError(
            f"{data} has missing cells; impute it first", error_code="MISSING_VALUES", context={"path": str(data)}
        )
    return table


@cli.command()
@click.option("--imputed", "imputed_dir", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--data", type=click.Path(path_type=Path), default=None, help="One completed table, e.g. imp1.csv.")
@click.option("--schema", "schema_path", type=click.Path(path_type=Path), default=None)
@click.option("--split", "split_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--adjusted", is_flag=True)
@click.option("--threshold", type=float, default=0.95, show_default=True, help="Cumulative variance rule.")
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Output directory.")
@click.pass_context
@stage_command("pca")
def pca(
    ctx: click.Context,
    imputed_dir: Optional[Path],
    data: Optional[Path],
    schema_path: Optional[Path],
    split_path: Optional[Path],
    adjusted: bool,
    threshold: float,
    out: Optional[Path],
) -> None:
    """PCA basis and factor scores; with --imputed also the factor regression.

    Both modes write basis.json and scores.csv. --data fits the basis on one
    completed table; --imputed fits per imputation and also writes the
    pooled test-set predictions.
    """
    if (imputed_dir is None) == (data is None):
        raise click.UsageError("Give exactly one of --imputed or --data")
    config = _validated(PcaConfig, {"threshold": threshold})
    directory = _out(ctx, out, "pca")
    if data is not None:
        table = _completed_table(data, schema_path)
        rows = SplitIndices.load(split_path).train if split_path is not None else tuple(range(table.n_rows))
        basis = fit_pca_basis(table, rows, config)
        save_pca_basis(basis, table, directory)
        k = basis.k_selected
        click.echo(f"k={k} factors explain {basis.explained_fraction[:k].sum():.3f} -> {directory}")
        return
    assert imputed_dir is not None
    imputed = ImputedSet.load(imputed_dir)
    predictions = predict_pca(imputed, _load_split(split_path, imputed), adjusted, config, directory)
    predictions.save(directory)
    click.echo(f"k={predictions.details['k']} factors -> {directory}")


@cli.command()
@click.option("--imputed", "imputed_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--split", "split_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--folds", type=int, default=50, show_default=True)
@click.option("--grid-size", type=int, default=100, show_default=True)
@click.option("--adjusted", is_flag=True)
@click.option("--penalize-covariates", is_flag=True)
@click.option("--criterion", type=click.Choice(["deviance", "misclassification"]), default="deviance")
@click.option("--global-standardize", is_flag=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Output directory.")
@click.pass_context
@stage_command("lasso")
def lasso(
    ctx: click.Context,
    imputed_dir: Path,
    split_path: Optional[Path],
    folds: int,
    grid_size: int,
    adjusted: bool,
    penalize_covariates: bool,
    criterion: str,
    global_standardize: bool,
    seed: Optional[int],
    out: Optional[Path],
) -> None:
    """Cross-validated L1 logistic regression on every imputation."""
    imputed = ImputedSet.load(imputed_dir)
    config = _validated(
        LassoConfig,
        {
            "n_folds": folds,
            "lambda_grid_size": grid_size,
            "penalize_covariates": penalize_covariates,
            "criterion": criterion,
            "global_standardize": global_standardize,
            "seed": _seed(ctx, seed),
        },
    )
    predictions = predict_lasso(imputed, _load_split(split_path, imputed), adjusted, config, _threads(ctx))
    directory = _out(ctx, out, "lasso")
    predictions.save(directory)
    click.echo(
        f"selected per imputation {predictions.details['selected_counts']}, "
        f"union {predictions.details['union_size']} -> {directory}"
    )


@cli.command()
@click.option("--imputed", "imputed_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--split", "split_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--trees", type=int, default=5000, show_default=True)
@click.option("--tune/--no-tune", default=False)
@click.option("--tuning-trees", type=int, default=200, show_default=True)
@click.option("--mtry", type=float, default=None, help="Fraction of features per split.")
@click.option("--adjusted", is_flag=True)
@click.option("--hard-vote", is_flag=True)
@click.option("--save-forests", is_flag=True, help="Also write the JSON forest dumps.")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Output directory.")
@click.pass_context
@stage_command("rf")
def rf(
    ctx: click.Context,
    imputed_dir: Path,
    split_path: Optional[Path],
    trees: int,
    tune: bool,
    tuning_trees: int,
    mtry: Optional[float],
    adjusted: bool,
    hard_vote: bool,
    save_forests: bool,
    seed: Optional[int],
    out: Optional[Path],
) -> None:
    """Random forest per imputation with optional two-stage tuning."""
    imputed = ImputedSet.load(imputed_dir)
    config = _validated(
        RfConfig, {"n_trees": trees, "mtry_fraction": mtry, "hard_vote": hard_vote, "seed": _seed(ctx, seed)}
    )
    tuning = _validated(RfTuningConfig, {"enabled": tune, "tuning_trees": tuning_trees})
    directory = _out(ctx, out, "rf")
    predictions = predict_forest(
        imputed,
        _load_split(split_path, imputed),
        adjusted,
        config,
        tuning,
        _threads(ctx),
        directory / "forests" if save_forests else None,
    )
    predictions.save(directory)
    ranking = predictions.details["importance"]
    pd.DataFrame(ranking, columns=["name", "importance"]).to_csv(
        directory / "importance.csv", index=False, float_format="%.17g"
    )
    click.echo(f"top feature {ranking[0]['name']} -> {directory}")


@cli.command()
@click.option(
    "--models", "model_dirs", type=click.Path(exists=True, path_type=Path), multiple=True, required=True
)
@click.option(
    "--labels",
    "labels_path",
    type=click.Path(path_type=Path),
    default=None,
    help="row,label CSV (split writes test.csv); defaults to the labels stored with each model.",
)
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Output directory.")
@click.pass_context
@stage_command("evaluate")
def evaluate(
    ctx: click.Context, model_dirs: Sequence[Path], labels_path: Optional[Path], threshold: float, out: Optional[Path]
) -> None:
    """Pool predictions across imputations and tabulate the metrics."""
    labels = read_labels(labels_path) if labels_path is not None else None
    reports = {}
    for directory in model_dirs:
        predictions = ModelPredictions.load(directory)
        if labels is not None:
            predictions = predictions.relabel(labels)
        reports[predictions.name] = predictions.evaluate(threshold)
    directory = _out(ctx, out, "evaluation")
    table = emit_table2(reports, directory)
    payload = {"models": {name: report.to_dict() for name, report in reports.items()}, "best_auc": table.best}
    (directory / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    click.echo(table.format(), nl=False)


@cli.command()
@click.pass_context
@stage_command("config")
def run(ctx: click.Context) -> None:
    """Run the whole experiment from the config file."""
    overrides: Dict[str, Any] = {"output_dir": ctx.obj.get("out"), "threads": ctx.obj.get("threads")}
    seed = ctx.obj.get("seed")
    if seed is not None:
        for section in ("split", "impute", "lasso", "rf"):
            overrides[section] = {"seed": seed}
    overrides = {key: str(value) if isinstance(value, Path) else value for key, value in overrides.items()}
    config = load_config(ctx.obj.get("config_path") or DEFAULT_CONFIG_PATH, overrides)
    result = run_pipeline(config)
    for name, report in result.reports.items():
        click.echo(f"{name:<32} AUC {report.auc:.3f}  accuracy {report.accuracy:.3f}")
    click.echo(f"outputs in {result.output_dir}")


def main() -> None:
    cli(obj={})


if __name__ == "__main__":
    main()
