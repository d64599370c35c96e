"""Fitted preprocessing transforms and pipelines.

Every transform is fitted on the training split only; ``apply`` is pure and
never touches the fitted state. Column arguments accept an explicit list of
names or one of the selectors below, resolved against the schema seen at fit
time:

``numeric``      input columns of kind numeric (raw or already numeric-encoded)
``categorical``  input label columns of kind categorical
``binary``       input label columns of kind binary
``labels``       every input label column
``inputs``       every input column
"""
from __future__ import annotations

import collections
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .dataset import Dataset, FeatureSpec, Schema, binary_labels, replace_spec
from .errors import ConfigError, ParseError, SchemaError, StateError, ValidationError

log = logging.getLogger(__name__)

SELECTORS = ("numeric", "categorical", "binary", "labels", "inputs")


def resolve_columns(schema: Schema, columns) -> list:
    if isinstance(columns, str):
        if columns not in SELECTORS:
            raise ConfigError(f"unknown column selector {columns!r} (expected a list or one of {SELECTORS})")
        out = []
        for f in schema.inputs:
            if columns == "inputs":
                out.append(f.name)
            elif columns == "numeric" and f.kind == "numeric":
                out.append(f.name)
            elif columns == "categorical" and f.kind == "categorical" and not f.numeric_storage:
                out.append(f.name)
            elif columns == "binary" and f.kind == "binary" and not f.numeric_storage:
                out.append(f.name)
            elif columns == "labels" and not f.numeric_storage:
                out.append(f.name)
        return out
    names = list(columns)
    for n in names:
        if n not in schema:
            raise ConfigError(f"unknown column {n!r}")
        if schema.get(n).role == "target":
            raise ConfigError(f"column {n!r} is the target and cannot be transformed")
    return names


# -- statistics (only ever called from fit) --------------------------------------

# Rows read by the statistic helpers, keyed by helper name. Fitting moves these
# counters; applying a fitted transform must leave them alone.
stat_rows_read = collections.Counter()


def _observed(d: Dataset, name):
    stat_rows_read["observed"] += d.n_rows
    col = d.column(name)
    return col[~d.missing(name)]


def _categories(d: Dataset, name):
    spec = d.schema.get(name)
    if spec.allowed_values is not None:
        return sorted(spec.allowed_values)
    return sorted(set(_observed(d, name)))


def _mean_std(d: Dataset, name):
    vals = _observed(d, name).astype(float)
    if len(vals) == 0:
        return math.nan, math.nan
    return float(vals.mean()), float(vals.std())


def _pearson(x, y):
    stat_rows_read["pearson"] += len(x)
    ok = ~np.isnan(x)
    x, y = x[ok], y[ok]
    if len(x) < 2:
        return 0.0
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        return 0.0
    return float(xc @ yc) / denom


def _condprob(d: Dataset, name, y):
    stat_rows_read["condprob"] += d.n_rows
    col = d.column(name)
    ok = ~d.missing(name)
    table = {}
    for label in sorted(set(col[ok])):
        hit = ok & (col == label)
        table[label] = 100.0 * float(y[hit].mean())
    return table, 100.0 * float(y.mean())


# -- transforms ----------------------------------------------------------------------

@dataclass
class Transform:
    columns: object = "inputs"
    state: dict | None = field(default=None, repr=False)

    kind = "transform"

    @property
    def fitted(self):
        return self.state is not None

    def params(self):
        return {"columns": self.columns}

    def fit(self, d: Dataset) -> "Transform":
        out = type(self)(**self.params())
        out.state = {"input_columns": d.schema.names, **out._fit(d)}
        return out

    def _fit(self, d):
        return {}

    def apply(self, d: Dataset, training=False) -> Dataset:
        if not self.fitted:
            raise StateError(f"{self.kind}: apply called before fit")
        if d.schema.names != self.state["input_columns"]:
            raise SchemaError(
                f"{self.kind}: input columns {d.schema.names} differ from those seen at fit {self.state['input_columns']}"
            )
        return self._apply(d, training)

    def _apply(self, d, training):
        raise NotImplementedError

    def to_dict(self):
        return {"kind": self.kind, "params": self.params(), "state": _jsonable(self.state)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) else v
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _replace_column(d: Dataset, name, values, spec: FeatureSpec) -> Dataset:
    feats = [spec if f.name == name else f for f in d.schema.features]
    cols = d.columns
    cols[name] = values
    return d.with_columns(d.schema.with_features(feats), cols)


class IntegerEncode(Transform):
    """Map categories to 0..k-1 in lexicographic order; unseen labels become -1."""

    kind = "integer_encode"

    def __init__(self, columns="labels", state=None):
        super().__init__(columns, state)

    def _fit(self, d):
        names = resolve_columns(d.schema, self.columns)
        for n in names:
            spec = d.schema.get(n)
            if spec.kind == "numeric" or spec.numeric_storage:
                raise ConfigError(f"integer_encode: column {n!r} is not categorical")
        return {"columns": names, "maps": {n: _categories(d, n) for n in names}}

    def _apply(self, d, training):
        for n in self.state["columns"]:
            cats = {c: i for i, c in enumerate(self.state["maps"][n])}
            col, miss = d.column(n), d.missing(n)
            codes = np.array([np.nan if m else float(cats.get(v, -1)) for v, m in zip(col, miss)])
            d = _replace_column(d, n, codes, replace_spec(d.schema.get(n), derived=self.kind))
        return d


class OneHotEncode(Transform):
    """Expand categorical columns into ``<col>=<label>`` indicator columns."""

    kind = "onehot_encode"

    def __init__(self, columns="categorical", state=None):
        super().__init__(columns, state)

    def _fit(self, d):
        names = []
        for n in resolve_columns(d.schema, self.columns):
            spec = d.schema.get(n)
            if spec.kind == "binary":
                log.info("onehot_encode: leaving binary column %r unexpanded", n)
                continue
            if spec.numeric_storage:
                raise ConfigError(f"onehot_encode: column {n!r} is not categorical")
            names.append(n)
        return {"columns": names, "maps": {n: _categories(d, n) for n in names}}

    def _apply(self, d, training):
        cols = d.columns
        feats = []
        for f in d.schema.features:
            if f.name not in self.state["columns"]:
                feats.append(f)
                continue
            col = cols.pop(f.name)
            miss = d.missing(f.name)
            for label in self.state["maps"][f.name]:
                name = f"{f.name}={label}"
                cols[name] = np.where(miss, 0.0, (col == label).astype(float))
                feats.append(FeatureSpec(name, "binary", role=f.role, derived=self.kind))
        return d.with_columns(d.schema.with_features(feats), cols)


class ZScore(Transform):
    """Standardise with the training mean and population standard deviation."""

    kind = "zscore"

    def __init__(self, columns="numeric", state=None):
        super().__init__(columns, state)

    def _fit(self, d):
        names = resolve_columns(d.schema, self.columns)
        stats = {}
        for n in names:
            if not d.schema.get(n).numeric_storage:
                raise ConfigError(f"zscore: column {n!r} is not numeric")
            stats[n] = _mean_std(d, n)
        return {"columns": names, "stats": stats}

    def _apply(self, d, training):
        for n in self.state["columns"]:
            mu, sigma = self.state["stats"][n]
            col = d.column(n)
            if not sigma or math.isnan(sigma):
                out = np.where(np.isnan(col), np.nan, 0.0)
            else:
                out = (col - mu) / sigma
            d = _replace_column(d, n, out, d.schema.get(n))
        return d

    def inverse(self, d: Dataset) -> Dataset:
        for n in self.state["columns"]:
            mu, sigma = self.state["stats"][n]
            d = _replace_column(d, n, d.column(n) * sigma + mu, d.schema.get(n))
        return d


class ImputeMean(Transform):
    """Fill missing numeric cells with the training mean."""

    kind = "impute_mean"

    def __init__(self, columns="numeric", state=None):
        super().__init__(columns, state)

    def _fit(self, d):
        names = resolve_columns(d.schema, self.columns)
        means = {}
        for n in names:
            if not d.schema.get(n).numeric_storage:
                raise ConfigError(f"impute_mean: column {n!r} is not numeric")
            mu, _ = _mean_std(d, n)
            if math.isnan(mu):
                raise ValidationError(f"impute_mean: column {n!r} is entirely missing in the training split")
            means[n] = mu
        return {"columns": names, "means": means}

    def _apply(self, d, training):
        cols = d.columns
        for n in self.state["columns"]:
            cols[n] = np.where(np.isnan(cols[n]), self.state["means"][n], cols[n])
        return d.with_columns(d.schema, cols)


class CorrelationFilter(Transform):
    """Drop columns whose absolute Pearson correlation with the target is below ``threshold``."""

    kind = "correlation_filter"

    def __init__(self, threshold=None, columns="inputs", state=None):
        super().__init__(columns, state)
        if threshold is None:
            raise ConfigError("correlation_filter needs an explicit threshold")
        self.threshold = float(threshold)

    def params(self):
        return {"threshold": self.threshold, "columns": self.columns}

    def _fit(self, d):
        names = resolve_columns(d.schema, self.columns)
        labels = [n for n in names if not d.schema.get(n).numeric_storage]
        if labels:
            raise SchemaError(f"correlation_filter needs numeric columns; encode {labels} first")
        y = d.target_vector()
        corr = {n: _pearson(d.column(n), y) for n in names}
        kept = [n for n in names if abs(corr[n]) >= self.threshold]
        return {"columns": names, "correlations": corr, "kept": kept}

    def _apply(self, d, training):
        kept = set(self.state["kept"])
        return d.drop_columns([n for n in self.state["columns"] if n not in kept])


class CondProbEncode(Transform):
    """Replace each category by 100 x P(target = 1 | category) on the training split."""

    kind = "condprob_encode"

    def __init__(self, columns="categorical", state=None):
        super().__init__(columns, state)

    def _fit(self, d):
        if not d.schema.is_classification:
            raise ConfigError("condprob_encode needs a binary classification task")
        names = resolve_columns(d.schema, self.columns)
        y = d.target_vector()
        tables, rate = {}, 0.0
        for n in names:
            if d.schema.get(n).numeric_storage:
                raise ConfigError(f"condprob_encode: column {n!r} is not categorical")
            tables[n], rate = _condprob(d, n, y)
        if not names:
            rate = 100.0 * float(y.mean()) if len(y) else 0.0
        return {"columns": names, "tables": tables, "global_rate": rate}

    def _apply(self, d, training):
        rate = self.state["global_rate"]
        for n in self.state["columns"]:
            table = self.state["tables"][n]
            col, miss = d.column(n), d.missing(n)
            out = np.array([rate if m else table.get(v, rate) for v, m in zip(col, miss)], dtype=float)
            d = _replace_column(d, n, out, replace_spec(d.schema.get(n), kind="numeric", allowed_values=None, derived=self.kind))
        return d


_MONTH_NAMES = ["january", "february", "march", "april", "may", "june", "july",
                "august", "september", "october", "november", "december"]
_MONTHS = {**{m: i + 1 for i, m in enumerate(_MONTH_NAMES)}, **{m[:3]: i + 1 for i, m in enumerate(_MONTH_NAMES)}}
_NUM = r"([-+]?\d+(?:\.\d+)?)"
_UNIT = r"(?:\s+[a-z]+)?"
_RANGE_PATTERNS = (
    (re.compile(rf"^{_NUM}{_UNIT}\s+to\s+{_NUM}{_UNIT}$"), lambda a, b: (a + b) / 2.0),
    (re.compile(rf"^(?:more than|over|above)\s+{_NUM}{_UNIT}$"), lambda a: a),
    (re.compile(rf"^(?:less than|under|below)\s+{_NUM}{_UNIT}$"), lambda a: a),
    (re.compile(rf"^{_NUM}{_UNIT}$"), lambda a: a),
)


def parse_range(text, overrides=None):
    """Numeric value of a range label.

    ``"A to B"`` -> midpoint, ``"more than A"``/``"less than A"`` -> A,
    ``"none"`` -> 0, month names -> 1..12, a bare number (optionally followed
    by a unit word) -> that number. ``overrides`` maps exact labels to values.
    """
    if overrides and text in overrides:
        return float(overrides[text])
    s = str(text).strip().lower()
    if s == "none":
        return 0.0
    if s in _MONTHS:
        return float(_MONTHS[s])
    for pattern, fn in _RANGE_PATTERNS:
        m = pattern.match(s)
        if m:
            return float(fn(*(float(g) for g in m.groups())))
    raise ParseError(f"cannot interpret range label {text!r}")


class RangeToMidpoint(Transform):
    kind = "range_to_midpoint"

    def __init__(self, columns="labels", overrides=None, state=None):
        super().__init__(columns, state)
        self.overrides = dict(overrides or {})

    def params(self):
        return {"columns": self.columns, "overrides": self.overrides}

    def _fit(self, d):
        names = resolve_columns(d.schema, self.columns)
        for n in names:
            if d.schema.get(n).numeric_storage:
                raise ConfigError(f"range_to_midpoint: column {n!r} is already numeric")
        return {"columns": names}

    def _apply(self, d, training):
        for n in self.state["columns"]:
            over = self.overrides.get(n, {})
            col, miss = d.column(n), d.missing(n)
            out = np.empty(len(col))
            for i, (v, m) in enumerate(zip(col, miss)):
                if m:
                    out[i] = np.nan
                    continue
                try:
                    out[i] = parse_range(v, over)
                except ParseError:
                    raise ParseError(f"range_to_midpoint: row {i}, column {n!r}: cannot interpret {v!r}", row=i, column=n) from None
            d = _replace_column(d, n, out, replace_spec(d.schema.get(n), kind="numeric", allowed_values=None, derived=self.kind))
        return d


class BinaryPm1(Transform):
    """Recode binary columns: positive label -> 1, negative label -> -1."""

    kind = "binary_pm1"

    def __init__(self, columns="binary", state=None):
        super().__init__(columns, state)

    def _fit(self, d):
        names = resolve_columns(d.schema, self.columns)
        labels = {}
        for n in names:
            spec = d.schema.get(n)
            if spec.numeric_storage:
                vals = set(_observed(d, n).tolist())
                if not vals <= {-1.0, 1.0}:
                    raise ValidationError(f"binary_pm1: numeric column {n!r} holds values other than +/-1")
                labels[n] = None
                continue
            observed = set(_observed(d, n))
            if len(observed) > 2:
                raise ValidationError(f"binary_pm1: column {n!r} has {len(observed)} distinct values")
            if spec.kind != "binary" and spec.allowed_values is None:
                raise ValidationError(f"binary_pm1: column {n!r} is not binary")
            labels[n] = list(binary_labels(spec, observed))
        return {"columns": names, "labels": labels}

    def _apply(self, d, training):
        for n in self.state["columns"]:
            pair = self.state["labels"][n]
            if pair is None:
                continue
            neg, pos = pair
            col, miss = d.column(n), d.missing(n)
            out = np.empty(len(col))
            for i, (v, m) in enumerate(zip(col, miss)):
                if m:
                    out[i] = np.nan
                elif v == pos:
                    out[i] = 1.0
                elif v == neg:
                    out[i] = -1.0
                else:
                    raise ValidationError(f"binary_pm1: row {i}, column {n!r}: {v!r} is neither {neg!r} nor {pos!r}")
            d = _replace_column(d, n, out, replace_spec(d.schema.get(n), derived=self.kind))
        return d


class DropColumns(Transform):
    kind = "drop_columns"

    def __init__(self, columns=(), state=None):
        super().__init__(list(columns), state)

    def _fit(self, d):
        return {"columns": resolve_columns(d.schema, self.columns)}

    def _apply(self, d, training):
        return d.drop_columns(self.state["columns"])


class Smote(Transform):
    """Oversample the minority class up to ``target_minority_fraction`` of the training rows.

    Only touches data passed with ``training=True``; validation and test data
    pass through unchanged.
    """

    kind = "smote"

    def __init__(self, target_minority_fraction=0.25, k_neighbors=5, seed=0, columns="inputs", state=None):
        super().__init__(columns, state)
        if not 0 < target_minority_fraction < 1:
            raise ConfigError("target_minority_fraction must lie in (0, 1)")
        self.target_minority_fraction = float(target_minority_fraction)
        self.k_neighbors = int(k_neighbors)
        self.seed = int(seed)

    def params(self):
        return {
            "target_minority_fraction": self.target_minority_fraction,
            "k_neighbors": self.k_neighbors,
            "seed": self.seed,
            "columns": self.columns,
        }

    def _fit(self, d):
        if not d.schema.is_classification:
            raise ConfigError("smote needs a binary classification task")
        names = resolve_columns(d.schema, self.columns)
        labels = [n for n in names if not d.schema.get(n).numeric_storage]
        if labels:
            raise SchemaError(f"smote runs on numeric data; encode {labels} first")
        return {"columns": names}

    def _apply(self, d, training):
        if not training:
            return d
        out, _ = smote(d, self.target_minority_fraction, self.k_neighbors, self.seed, self.state["columns"])
        return out


def smote_target_count(n_minority, n_majority, fraction):
    """Smallest minority count whose share of the total reaches ``fraction``."""
    need = math.ceil(fraction * n_majority / (1.0 - fraction) - 1e-9)
    return max(n_minority, need)


def smote(d: Dataset, target_minority_fraction=0.25, k_neighbors=5, seed=0, columns=None):
    """Append synthetic minority rows; returns ``(dataset, provenance)``.

    ``provenance`` is an ``(n_new, 3)`` array of ``(row_a, row_b, lam)`` per
    synthetic row, with row indices into ``d``.
    """
    names = d.input_names() if columns is None else list(columns)
    y = d.target_vector()
    pos = int(y.sum())
    neg = len(y) - pos
    minority = 1.0 if pos <= neg else 0.0
    n_min = min(pos, neg)
    n_maj = max(pos, neg)
    want = smote_target_count(n_min, n_maj, target_minority_fraction)
    n_new = want - n_min
    if n_new <= 0:
        return d, np.empty((0, 3))
    if n_min < k_neighbors + 1:
        raise ValidationError(f"smote: minority class has {n_min} rows, needs at least {k_neighbors + 1}")
    min_idx = np.flatnonzero(y == minority)
    X = d.to_matrix(names)[min_idx]
    nn = kernels.knn_indices(X, k_neighbors)
    rng = np.random.default_rng(seed)
    a = rng.integers(0, n_min, n_new)
    b = nn[a, rng.integers(0, k_neighbors, n_new)]
    lam = rng.uniform(0.0, 1.0, n_new)
    xa, xb = X[a], X[b]
    synth = xa + lam[:, None] * (xb - xa)
    # a missing coordinate on either end keeps the anchor's value
    gap = np.isnan(xa) | np.isnan(xb)
    synth[gap] = xa[gap]

    cols = d.columns
    tname = d.schema.target.name
    new_cols = {}
    for spec in d.schema.features:
        n = spec.name
        if n in names:
            new_cols[n] = synth[:, names.index(n)]
        elif n == tname:
            label = d.column(n)[min_idx[0]]
            new_cols[n] = np.full(n_new, label, dtype=object if not spec.numeric_storage else float)
        elif spec.numeric_storage:
            new_cols[n] = cols[n][min_idx[a]]
        else:
            new_cols[n] = cols[n][min_idx[a]]
    extra = d.with_columns(d.schema, new_cols)
    provenance = np.column_stack([min_idx[a], min_idx[b], lam])
    return d.concat(extra), provenance


TRANSFORMS = {
    cls.kind: cls
    for cls in (
        IntegerEncode,
        OneHotEncode,
        ZScore,
        ImputeMean,
        CorrelationFilter,
        CondProbEncode,
        RangeToMidpoint,
        BinaryPm1,
        DropColumns,
        Smote,
    )
}


def make_transform(step) -> Transform:
    if isinstance(step, Transform):
        return step
    step = dict(step)
    kind = step.pop("kind", None)
    if kind not in TRANSFORMS:
        raise ConfigError(f"unknown transform kind {kind!r}; expected one of {sorted(TRANSFORMS)}")
    try:
        return TRANSFORMS[kind](**step)
    except TypeError as exc:
        raise ConfigError(f"{kind}: {exc}") from None


@dataclass
class Pipeline:
    steps: list
    fitted: bool = False

    def apply(self, d: Dataset, training=False) -> Dataset:
        if not self.fitted:
            raise StateError("pipeline applied before fit")
        for step in self.steps:
            d = step.apply(d, training=training)
        return d

    def to_dict(self):
        return {"fitted": self.fitted, "steps": [s.to_dict() for s in self.steps]}

    @classmethod
    def from_dict(cls, data):
        steps = []
        for s in data["steps"]:
            t = TRANSFORMS[s["kind"]](**s["params"])
            t.state = s.get("state")
            steps.append(t)
        return cls(steps, bool(data.get("fitted", False)))


def fit_transform(steps: Sequence, train: Dataset, bypass_oversampling=0):
    """Fit a pipeline and return it with the transformed (possibly oversampled) training data.

    Each step is fitted on the output of the previous ones, so every statistic
    comes from the training split. The last ``bypass_oversampling`` rows of
    ``train`` are withheld from any oversampling step and re-attached after it.
    """
    fitted = []
    current = train
    for step in steps:
        t = make_transform(step).fit(current)
        if bypass_oversampling and isinstance(t, Smote):
            n = current.n_rows
            head = current.take(np.arange(n - bypass_oversampling))
            tail = current.take(np.arange(n - bypass_oversampling, n))
            t = make_transform(step).fit(head)
            current = t.apply(head, training=True).concat(tail)
        else:
            current = t.apply(current, training=True)
        fitted.append(t)
    return Pipeline(fitted, fitted=True), current


def fit_pipeline(steps: Sequence, train: Dataset) -> Pipeline:
    return fit_transform(steps, train)[0]
