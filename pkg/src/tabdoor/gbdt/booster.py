"""Gradient boosting driver: losses, bagging, feature subsampling, prediction."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .. import kernels
from ..errors import ConfigError, ShapeError, ValidationError
from .binning import BinnedData
from .tree import Tree, grow_tree

TASKS = ("regression", "classification")


@dataclass(frozen=True)
class GbdtParams:
    num_leaves: int = 31
    max_bin: int = 255
    min_data_in_leaf: int = 20
    feature_fraction: float = 1.0
    bagging_fraction: float = 1.0
    bagging_freq: int = 0
    learning_rate: float = 0.1
    n_estimators: int | None = None  # accepted for config parity; rounds come from num_iterations
    max_depth: int = -1
    num_iterations: int = 100
    min_gain_to_split: float = 0.0
    scale_pos_weight: float = 1.0
    lambda_l2: float = 0.0
    min_sum_hessian_in_leaf: float = 1e-3
    max_cat_scan: int = 32
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.num_leaves >= 2, "num_leaves must be >= 2"),
            (self.max_bin >= 2, "max_bin must be >= 2"),
            (self.min_data_in_leaf >= 1, "min_data_in_leaf must be >= 1"),
            (0 < self.feature_fraction <= 1, "feature_fraction must be in (0, 1]"),
            (0 < self.bagging_fraction <= 1, "bagging_fraction must be in (0, 1]"),
            (self.bagging_freq >= 0, "bagging_freq must be >= 0"),
            (self.learning_rate > 0, "learning_rate must be > 0"),
            (self.num_iterations >= 0, "num_iterations must be >= 0"),
            (self.min_gain_to_split >= 0, "min_gain_to_split must be >= 0"),
            (self.scale_pos_weight > 0, "scale_pos_weight must be > 0"),
            (self.lambda_l2 >= 0, "lambda_l2 must be >= 0"),
            (self.max_cat_scan >= 1, "max_cat_scan must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown GBDT parameter(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _gradients(task, y, raw, pos_weight):
    if task == "regression":
        return raw - y, np.ones_like(raw)
    p = _sigmoid(raw)
    w = np.where(y > 0.5, pos_weight, 1.0)
    return w * (p - y), w * p * (1.0 - p)


def _loss(task, y, raw):
    if task == "regression":
        return float(np.mean((raw - y) ** 2))
    # log(1 + e^z) - y z, computed stably
    return float(np.mean(np.logaddexp(0.0, raw) - y * raw))


@dataclass
class GbdtModel:
    params: GbdtParams
    trees: list
    base_score: float
    task: str
    n_features: int
    categorical: tuple = ()
    feature_names: tuple | None = None
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        self._forest = None

    def forest(self):
        """All trees flattened into one set of node arrays."""
        if self._forest is None:
            self._forest = _flatten(self.trees)
        return self._forest

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeError(f"expected rows of width {self.n_features}, got shape {X.shape}")
        return X

    def predict_raw(self, X, n_trees=None):
        X = self._check(X)
        trees = self.trees if n_trees is None else self.trees[:n_trees]
        forest = self.forest() if n_trees is None else _flatten(trees)
        return self.base_score + kernels.predict_forest(X, forest, self.params.learning_rate)

    def predict(self, X, n_trees=None):
        raw = self.predict_raw(X, n_trees)
        return _sigmoid(raw) if self.task == "classification" else raw

    def staged_predict(self, X):
        """Yield predictions after each boosting round (round 0 = base score only)."""
        X = self._check(X)
        raw = np.full(X.shape[0], self.base_score)
        out = (lambda r: _sigmoid(r)) if self.task == "classification" else (lambda r: r.copy())
        yield out(raw)
        for tree in self.trees:
            raw = raw + self.params.learning_rate * tree.predict(X)
            yield out(raw)

    def to_dict(self):
        return {
            "format": "tabdoor-gbdt/1",
            "task": self.task,
            "base_score": self.base_score,
            "n_features": self.n_features,
            "categorical": list(self.categorical),
            "feature_names": list(self.feature_names) if self.feature_names is not None else None,
            "params": self.params.to_dict(),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d):
        names = d.get("feature_names")
        return cls(
            params=GbdtParams.from_dict(d["params"]),
            trees=[Tree.from_dict(t) for t in d["trees"]],
            base_score=float(d["base_score"]),
            task=d["task"],
            n_features=int(d["n_features"]),
            categorical=tuple(d.get("categorical", ())),
            feature_names=tuple(names) if names is not None else None,
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _flatten(trees):
    keys = ("feature", "threshold", "default_left", "is_cat", "left", "right", "value", "cat_start", "cat_len")
    parts = {k: [] for k in keys}
    codes, roots = [], []
    node_off = code_off = 0
    for t in trees:
        roots.append(node_off)
        for k in keys:
            v = getattr(t, k)
            if k in ("left", "right"):
                v = np.where(v >= 0, v + node_off, -1)
            elif k == "cat_start":
                v = v + code_off
            parts[k].append(v)
        codes.append(t.cat_codes)
        node_off += t.n_nodes
        code_off += len(t.cat_codes)
    dtypes = {"feature": np.int64, "threshold": np.float64, "default_left": np.bool_, "is_cat": np.bool_,
              "left": np.int64, "right": np.int64, "value": np.float64, "cat_start": np.int64, "cat_len": np.int64}
    out = {k: np.ascontiguousarray(np.concatenate(parts[k]) if parts[k] else np.zeros(0), dtype=dtypes[k]) for k in keys}
    out["cat_codes"] = np.ascontiguousarray(np.concatenate(codes) if codes else np.zeros(0), dtype=np.int64)
    out["roots"] = np.array(roots, dtype=np.int64)
    return out


def fit(X, y, params: GbdtParams, task="regression", X_val=None, y_val=None, categorical=(), feature_names=None):
    """Boost exactly ``params.num_iterations`` trees on ``(X, y)``.

    The validation pair, when given, is only scored for the history; it never
    influences training.
    """
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError("training matrix must be 2-d and non-empty")
    if y.shape != (X.shape[0],):
        raise ShapeError(f"target length {y.shape} does not match {X.shape[0]} rows")
    if np.isnan(y).any():
        raise ValidationError("training target contains missing values")
    if task == "classification" and not np.isin(y, (0.0, 1.0)).all():
        raise ValidationError("classification targets must be 0 or 1")
    if params.n_estimators is not None and params.n_estimators != params.num_iterations:
        warnings.warn(
            f"n_estimators={params.n_estimators} is ignored; training runs num_iterations={params.num_iterations} rounds",
            stacklevel=2,
        )

    n, n_feat = X.shape
    if task == "regression":
        base = float(y.mean())
    else:
        rate = float(np.clip(y.mean(), 1e-12, 1 - 1e-12))
        base = float(np.log(rate / (1.0 - rate)))

    data = BinnedData(X, params.max_bin, categorical)
    bag_seq, feat_seq = np.random.SeedSequence(params.seed).spawn(2)
    bag_rng, feat_rng = np.random.default_rng(bag_seq), np.random.default_rng(feat_seq)
    all_rows = np.arange(n, dtype=np.int64)
    all_feats = np.arange(n_feat, dtype=np.int64)
    bagging = params.bagging_freq > 0 and params.bagging_fraction < 1.0
    n_sub = max(1, int(round(params.feature_fraction * n_feat)))

    raw = np.full(n, base)
    val_raw = None
    if X_val is not None:
        X_val = np.asarray(X_val, dtype=np.float64)
        val_raw = np.full(X_val.shape[0], base)
    history = {"train_loss": [_loss(task, y, raw)], "val_loss": []}
    if val_raw is not None:
        history["val_loss"].append(_loss(task, np.asarray(y_val, dtype=float), val_raw))

    rows = all_rows
    trees = []
    for it in range(params.num_iterations):
        grad, hess = _gradients(task, y, raw, params.scale_pos_weight)
        if bagging and it % params.bagging_freq == 0:
            k = max(1, int(params.bagging_fraction * n))
            rows = np.sort(bag_rng.choice(n, size=k, replace=False)).astype(np.int64)
        feats = all_feats
        if n_sub < n_feat:
            feats = np.sort(feat_rng.choice(n_feat, size=n_sub, replace=False)).astype(np.int64)
        tree = grow_tree(data, grad, hess, rows, params, feats)
        trees.append(tree)
        raw = raw + params.learning_rate * tree.predict(X)
        history["train_loss"].append(_loss(task, y, raw))
        if val_raw is not None:
            val_raw = val_raw + params.learning_rate * tree.predict(X_val)
            history["val_loss"].append(_loss(task, np.asarray(y_val, dtype=float), val_raw))

    return GbdtModel(params, trees, base, task, n_feat, tuple(int(c) for c in categorical),
                     tuple(feature_names) if feature_names is not None else None, history)


def predict(model: GbdtModel, X):
    return model.predict(X)
