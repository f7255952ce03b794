"""Confusion-matrix metrics, ROC curves, AUC and the model comparison table.

ROC vertices follow the usual threshold sweep over distinct scores in
descending order; tied scores collapse to one vertex. The trapezoid area is
accumulated in integer counts and divided once, which makes it exactly the
Mann-Whitney concordance (ties counted as one half).
"""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from cad_predictor.core.exceptions import EmptyInputError, LengthMismatchError, OneClassOnlyError, OutOfRangeError
from cad_predictor.impute import pool_predictions

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
TABLE_COLUMNS = ("Accuracy", "AUC", "Sensitivity", "Specificity", "PPV", "NPV")


def _validate(probs: Sequence[float], labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if probs.size != labels.size:
        raise LengthMismatchError(labels.size, probs.size, "probabilities")
    if probs.size == 0:
        raise EmptyInputError("No predictions to evaluate")
    bad = np.flatnonzero(~((probs >= 0.0) & (probs <= 1.0)))
    if bad.size:
        raise OutOfRangeError(float(probs[bad[0]]))
    bad_labels = np.flatnonzero((labels != 0) & (labels != 1))
    if bad_labels.size:
        raise OutOfRangeError(float(labels[bad_labels[0]]))
    return probs, labels.astype(np.int64)


def _ratio(numerator: int, denominator: int) -> float:
    return numerator / denominator if denominator else float("nan")


@dataclass(frozen=True)
class ConfusionCounts:
    """Counts at a threshold; a prediction is positive iff prob >= threshold."""

    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float = DEFAULT_THRESHOLD

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return _ratio(self.tp + self.tn, self.n)

    @property
    def sensitivity(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> float:
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def ppv(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def npv(self) -> float:
        return _ratio(self.tn, self.tn + self.fn)

    def annotations(self) -> Dict[str, str]:
        """Why each undefined ratio is undefined."""
        notes = {}
        if self.tp + self.fn == 0:
            notes["sensitivity"] = "no positive labels"
        if self.tn + self.fp == 0:
            notes["specificity"] = "no negative labels"
        if self.tp + self.fp == 0:
            notes["ppv"] = "no predicted positives"
        if self.tn + self.fn == 0:
            notes["npv"] = "no predicted negatives"
        return notes


def confusion(probs: Sequence[float], labels: Sequence[int], threshold: float = DEFAULT_THRESHOLD) -> ConfusionCounts:
    """Confusion counts of ``probs >= threshold`` against binary ``labels``.

    Raises:
        LengthMismatchError, EmptyInputError, OutOfRangeError
    """
    probs, labels = _validate(probs, labels)
    predicted = probs >= threshold
    positive = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(predicted & positive)),
        fp=int(np.sum(predicted & ~positive)),
        tn=int(np.sum(~predicted & ~positive)),
        fn=int(np.sum(~predicted & positive)),
        threshold=threshold,
    )


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"fpr": self.fpr, "tpr": self.tpr})


def roc_auc(probs: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """ROC polyline from (0,0) to (1,1) and its trapezoidal area.

    Raises:
        OneClassOnlyError: If ``labels`` lack one of the classes.
    """
    probs, labels = _validate(probs, labels)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnlyError("ROC needs both classes", context={"positives": n_pos, "negatives": n_neg})

    order = np.argsort(-probs, kind="stable")
    scores = probs[order]
    hits = labels[order]
    # Last index of each run of equal scores.
    ends = np.r_[np.flatnonzero(scores[1:] != scores[:-1]), scores.size - 1]
    tp = np.r_[0, np.cumsum(hits)[ends]].astype(np.int64)
    fp = np.r_[0, np.cumsum(1 - hits)[ends]].astype(np.int64)

    twice_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    return RocCurve(fpr=fp / n_neg, tpr=tp / n_pos, auc=auc)


@dataclass(frozen=True)
class EvalReport:
    """Threshold metrics plus ROC/AUC for one model."""

    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    sensitivity: float
    specificity: float
    ppv: float
    npv: float
    auc: float
    roc: RocCurve
    threshold: float = DEFAULT_THRESHOLD
    annotations: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        def number(value: float) -> Optional[float]:
            return None if np.isnan(value) else float(value)

        return {
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "threshold": self.threshold,
            "accuracy": number(self.accuracy),
            "sensitivity": number(self.sensitivity),
            "specificity": number(self.specificity),
            "ppv": number(self.ppv),
            "npv": number(self.npv),
            "auc": number(self.auc),
            "annotations": dict(self.annotations),
            "roc": {"fpr": self.roc.fpr.tolist(), "tpr": self.roc.tpr.tolist()},
        }


def evaluate(probs: Sequence[float], labels: Sequence[int], threshold: float = DEFAULT_THRESHOLD) -> EvalReport:
    counts = confusion(probs, labels, threshold)
    curve = roc_auc(probs, labels)
    return EvalReport(
        tp=counts.tp,
        fp=counts.fp,
        tn=counts.tn,
        fn=counts.fn,
        accuracy=counts.accuracy,
        sensitivity=counts.sensitivity,
        specificity=counts.specificity,
        ppv=counts.ppv,
        npv=counts.npv,
        auc=curve.auc,
        roc=curve,
        threshold=threshold,
        annotations=counts.annotations(),
    )


def evaluate_pooled(
    prob_vectors: Sequence[Sequence[float]], labels: Sequence[int], threshold: float = DEFAULT_THRESHOLD
) -> EvalReport:
    """Average the per-imputation predictions, then evaluate the mean."""
    return evaluate(pool_predictions([np.asarray(v, dtype=np.float64) for v in prob_vectors]), labels, threshold)


def slugify(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


def model_block(name: str) -> str:
    """Comparison block of a model name: adjusted models are compared among themselves."""
    return "adjusted" if re.search(r"(?<!un)adjusted\s*$", name.strip().lower()) else "unadjusted"


@dataclass(frozen=True)
class Table2:
    frame: pd.DataFrame
    best: Dict[str, str]

    def format(self) -> str:
        """Fixed-width rendering with ``*`` after the best AUC of each block."""
        header = f"{'Model':<32}" + "".join(f"{column:>13}" for column in TABLE_COLUMNS)
        lines = [header, "-" * len(header)]
        for name, row in self.frame.iterrows():
            cells = []
            for column in TABLE_COLUMNS:
                value = row[column]
                text = "NA" if pd.isna(value) else f"{value:.3f}"
                if column == "AUC" and self.best.get(model_block(str(name))) == name:
                    text += "*"
                cells.append(f"{text:>13}")
            lines.append(f"{str(name):<32}" + "".join(cells))
        return "\n".join(lines) + "\n"


def emit_table2(reports: Mapping[str, EvalReport], out_dir: Optional[Union[str, Path]] = None) -> Table2:
    """Build the model comparison table and, with ``out_dir``, write it with one ROC CSV per model.

    Files: ``table2.csv``, ``table2.txt`` and ``roc_<model>.csv`` (columns fpr,tpr).
    """
    if not reports:
        raise EmptyInputError("No reports to tabulate")
    rows: List[Dict[str, Any]] = []
    best: Dict[str, str] = {}
    for name, report in reports.items():
        rows.append(
            {
                "Model": name,
                "Accuracy": report.accuracy,
                "AUC": report.auc,
                "Sensitivity": report.sensitivity,
                "Specificity": report.specificity,
                "PPV": report.ppv,
                "NPV": report.npv,
            }
        )
        block = model_block(name)
        if block not in best or report.auc > reports[best[block]].auc:
            best[block] = name
    frame = pd.DataFrame(rows).set_index("Model")
    frame["best_auc"] = [best.get(model_block(name)) == name for name in frame.index]
    table = Table2(frame=frame, best=best)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out_dir / "table2.csv", float_format="%.17g")
        (out_dir / "table2.txt").write_text(table.format(), encoding="utf-8")
        for name, report in reports.items():
            report.roc.to_frame().to_csv(out_dir / f"roc_{slugify(name)}.csv", index=False, float_format="%.17g")
        logger.info("Wrote comparison table and %d ROC curves to %s", len(reports), out_dir)
    return table
