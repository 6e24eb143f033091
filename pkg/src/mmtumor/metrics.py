"""Binary-classification metrics and cross-validation report assembly."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EvaluationError, ShapeError

METRIC_COLUMNS = ("accuracy", "auc", "loss", "precision", "recall", "f1")

# Header used by the delimited report table.
REPORT_HEADER = ("CV Fold", "Accuracy", "AUC", "Loss", "Precision", "Recall", "F1-Score")


@dataclass(frozen=True)
class ConfusionMatrix:
    """2x2 contingency counts; the positive class is ill (label 1)."""

    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self) -> None:
        for name in ("tp", "tn", "fp", "fn"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 0:
                raise EvaluationError(f"{name} must be a non-negative integer, got {value!r}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class FoldMetrics:
    """Scores for one validation fold."""

    fold: int
    accuracy: float
    auc: float
    loss: float
    precision: float
    recall: float
    f1: float

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, c) for c in METRIC_COLUMNS)


@dataclass(frozen=True)
class CvReport:
    """Per-fold metric rows plus their arithmetic column means."""

    folds: tuple[FoldMetrics, ...]
    averages: tuple[float, ...]


def _as_binary_vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size and not np.all(np.isin(arr, (0, 1))):
        raise EvaluationError(f"{name} must contain only 0 and 1")
    return arr.astype(np.int64)


def confusion(labels, predictions) -> ConfusionMatrix:
    """Count the four outcomes of binary predictions against labels."""
    y = _as_binary_vector(labels, "labels")
    p = _as_binary_vector(predictions, "predictions")
    if y.shape != p.shape:
        raise ShapeError(f"labels have length {y.size}, predictions {p.size}")
    return ConfusionMatrix(
        tp=int(np.sum((y == 1) & (p == 1))),
        tn=int(np.sum((y == 0) & (p == 0))),
        fp=int(np.sum((y == 0) & (p == 1))),
        fn=int(np.sum((y == 1) & (p == 0))),
    )


def _require_nonempty(cm: ConfusionMatrix) -> None:
    if cm.total == 0:
        raise EvaluationError("confusion matrix is empty")


def _ratio(num: int, den: int) -> float:
    """Fraction with the zero-denominator convention: 0, not NaN."""
    return num / den if den > 0 else 0.0


def accuracy(cm: ConfusionMatrix) -> float:
    _require_nonempty(cm)
    return (cm.tp + cm.tn) / cm.total


def precision(cm: ConfusionMatrix) -> float:
    _require_nonempty(cm)
    return _ratio(cm.tp, cm.tp + cm.fp)


def recall(cm: ConfusionMatrix) -> float:
    _require_nonempty(cm)
    return _ratio(cm.tp, cm.tp + cm.fn)


def f1(cm: ConfusionMatrix) -> float:
    _require_nonempty(cm)
    p = precision(cm)
    r = recall(cm)
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def auc(labels, scores) -> float:
    """Probability that an ill sample outranks a healthy one, ties at 0.5.

    Computed from tie-averaged ranks (the Mann-Whitney U statistic), which
    equals the pairwise definition exactly.
    """
    y = _as_binary_vector(labels, "labels")
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ShapeError(f"scores must be 1-D, got shape {s.shape}")
    if y.shape != s.shape:
        raise ShapeError(f"labels have length {y.size}, scores {s.size}")
    if not np.all(np.isfinite(s)):
        raise EvaluationError("scores must be finite")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError(
            f"auc undefined: need both classes, got {n_pos} positive / {n_neg} negative"
        )
    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.size, dtype=np.float64)
    ranks[order] = np.arange(1, s.size + 1)
    # Average ranks within tied score groups.
    sorted_scores = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = float(np.sum(ranks[y == 1])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def fold_metrics(fold: int, labels, predictions, scores, loss: float) -> FoldMetrics:
    """Assemble one fold's row from raw validation outputs."""
    cm = confusion(labels, predictions)
    return FoldMetrics(
        fold=fold,
        accuracy=accuracy(cm),
        auc=auc(labels, scores),
        loss=float(loss),
        precision=precision(cm),
        recall=recall(cm),
        f1=f1(cm),
    )


def aggregate(per_fold: Sequence[FoldMetrics]) -> CvReport:
    """Append the arithmetic column means as the averages row."""
    if not per_fold:
        raise EvaluationError("cannot aggregate an empty metrics list")
    table = np.array([m.values() for m in per_fold], dtype=np.float64)
    return CvReport(folds=tuple(per_fold), averages=tuple(table.mean(axis=0).tolist()))


def write_report_csv(report: CvReport, path: Path | str) -> None:
    """Fixed-width table: one row per fold plus the averages row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        for m in report.folds:
            writer.writerow([m.fold, *(f"{v:.6f}" for v in m.values())])
        writer.writerow(["Avg.", *(f"{v:.6f}" for v in report.averages)])


def write_report_json(report: CvReport, path: Path | str) -> None:
    """Full-precision structured form of the report."""
    payload = {
        "folds": [asdict(m) for m in report.folds],
        "averages": dict(zip(METRIC_COLUMNS, report.averages)),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_plot_data(report: CvReport, path: Path | str) -> None:
    """Long-format (fold, metric, value) rows for downstream plotting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "metric", "value"])
        for m in report.folds:
            for name, value in zip(METRIC_COLUMNS, m.values()):
                writer.writerow([m.fold, name, repr(float(value))])


def read_report_json(path: Path | str) -> CvReport:
    with open(path) as fh:
        payload = json.load(fh)
    folds = tuple(FoldMetrics(**row) for row in payload["folds"])
    averages = tuple(payload["averages"][c] for c in METRIC_COLUMNS)
    return CvReport(folds=folds, averages=averages)
