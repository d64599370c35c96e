"""Evaluation metrics and the count-indexed series used for attack curves."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError

# Column names of attack-curve CSVs.
ATTACK_PREDICTION = "prediction_of_attack_sample"
PROBE_MEDIAN = "median_prediction_modified_samples"
PROBE_ROLLING = "rolling_median_prediction_modified_samples"
X_COLUMN = "injected_samples"


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ShapeError(f"length mismatch: {pred.size} predictions vs {truth.size} targets")
    return pred, truth


def regression_metrics(pred, truth):
    pred, truth = _pair(pred, truth)
    if pred.size == 0:
        raise ShapeError("need at least one prediction")
    err = pred - truth
    mse = float(np.mean(err * err))
    return {"mse": mse, "mae": float(np.mean(np.abs(err))), "rmse": float(np.sqrt(mse))}


@dataclass(frozen=True)
class ConfusionMatrix:
    tn: int
    fp: int
    fn: int
    tp: int

    def __post_init__(self):
        if min(self.tn, self.fp, self.fn, self.tp) < 0:
            raise ValidationError("confusion counts must be non-negative")

    @property
    def total(self):
        return self.tn + self.fp + self.fn + self.tp

    @classmethod
    def from_labels(cls, predicted, truth):
        p = np.asarray(predicted, dtype=bool)
        t = np.asarray(truth, dtype=bool)
        return cls(int((~p & ~t).sum()), int((p & ~t).sum()), int((~p & t).sum()), int((p & t).sum()))


def fbeta_score(precision, recall, beta):
    b2 = beta * beta
    denom = b2 * precision + recall
    return 0.0 if denom == 0 else (1 + b2) * precision * recall / denom


@dataclass(frozen=True)
class ClassificationMetrics:
    confusion: ConfusionMatrix
    precision: float
    recall: float
    fbeta: float
    beta: float
    undefined: tuple = ()  # names of ratios whose denominator was zero (reported as 0)

    def as_dict(self):
        c = self.confusion
        return {"tn": c.tn, "fp": c.fp, "fn": c.fn, "tp": c.tp,
                "precision": self.precision, "recall": self.recall, "fbeta": self.fbeta}


def metrics_from_confusion(cm: ConfusionMatrix, beta=2.0) -> ClassificationMetrics:
    undefined = []
    if cm.tp + cm.fp == 0:
        precision = 0.0
        undefined.append("precision")
    else:
        precision = cm.tp / (cm.tp + cm.fp)
    if cm.tp + cm.fn == 0:
        recall = 0.0
        undefined.append("recall")
    else:
        recall = cm.tp / (cm.tp + cm.fn)
    return ClassificationMetrics(cm, precision, recall, fbeta_score(precision, recall, beta), beta, tuple(undefined))


def classification_metrics(prob, truth, threshold=0.5, beta=2.0) -> ClassificationMetrics:
    """Threshold probabilities (``prob >= threshold`` is positive) and score them."""
    prob, truth = _pair(prob, truth)
    if ((prob < 0) | (prob > 1)).any():
        raise ValidationError("probabilities must lie in [0, 1]")
    if not np.isin(truth, (0.0, 1.0)).all():
        raise ValidationError("targets must be 0 or 1")
    return metrics_from_confusion(ConfusionMatrix.from_labels(prob >= threshold, truth == 1.0), beta)


def rolling_median(series, window=5):
    """Trailing-window median; the first ``window - 1`` outputs use shorter windows."""
    if window < 1:
        raise ValidationError("window must be >= 1")
    s = np.asarray(series, dtype=np.float64)
    return np.array([np.median(s[max(0, i - window + 1): i + 1]) for i in range(len(s))])


@dataclass
class MetricSeries:
    """Named columns indexed by injected-sample count."""

    x: np.ndarray
    columns: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        if len(self.x) and (self.x[0] != 0 or (np.diff(self.x) <= 0).any()):
            raise ValidationError("series x must start at 0 and be strictly increasing")
        cols = {}
        for name, values in self.columns.items():
            v = np.asarray(values, dtype=np.float64)
            if v.shape != self.x.shape:
                raise ShapeError(f"column {name!r} has length {v.size}, expected {self.x.size}")
            cols[name] = v
        self.columns = cols

    def __getitem__(self, name):
        return self.columns[name]

    def with_column(self, name, values):
        return MetricSeries(self.x, {**self.columns, name: values})

    def to_rows(self):
        names = list(self.columns)
        yield [X_COLUMN] + names
        for i, x in enumerate(self.x):
            yield [str(int(x))] + [format_float(self.columns[n][i]) for n in names]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self.to_rows())

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header[0] != X_COLUMN:
            raise ValidationError(f"{path}: first column must be {X_COLUMN!r}")
        x = [int(r[0]) for r in body]
        cols = {name: [float(r[i + 1]) for r in body] for i, name in enumerate(header[1:])}
        return cls(np.array(x, dtype=np.int64), cols)

    def equals(self, other):
        return (np.array_equal(self.x, other.x) and list(self.columns) == list(other.columns)
                and all(np.array_equal(self.columns[k], other.columns[k], equal_nan=True) for k in self.columns))


def format_float(v):
    """Shortest round-trip text for a float, so CSVs are byte-stable."""
    v = float(v)
    if np.isnan(v):
        return "nan"
    return repr(v)


def aggregate_runs(runs, policy="median", validation_column=None, higher_is_better=False):
    """Combine repeated runs of one experiment into a single series.

    ``median`` takes the element-wise median of every column. ``best_by_validation``
    returns the run whose ``validation_column`` at count 0 is best.
    """
    runs = list(runs)
    if not runs:
        raise ValidationError("no runs to aggregate")
    x = runs[0].x
    names = list(runs[0].columns)
    for r in runs[1:]:
        if not np.array_equal(r.x, x):
            raise ShapeError("runs do not share the same injection counts")
        if list(r.columns) != names:
            raise ShapeError("runs do not share the same columns")
    if policy == "median":
        return MetricSeries(x, {n: np.median(np.stack([r.columns[n] for r in runs]), axis=0) for n in names})
    if policy == "best_by_validation":
        if validation_column is None:
            raise ValidationError("best_by_validation needs a validation column")
        scores = np.array([r.columns[validation_column][0] for r in runs])
        idx = int(np.argmax(scores) if higher_is_better else np.argmin(scores))
        return runs[idx]
    raise ValidationError(f"unknown aggregation policy {policy!r}")
