"""Fit a preprocessing pipeline and a model on a training split, then score it.

This is the unit of work repeated by every attack experiment: the poisoned
training split goes in raw, and everything downstream (deduplication,
encoders, oversampling, the model) is refitted from scratch.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import gbdt, mlp
from .dataset import Dataset, Splits, drop_duplicates
from .errors import ConfigError
from .metrics import classification_metrics, regression_metrics
from .preprocess import fit_transform

MODEL_KINDS = ("gbdt", "mlp")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        # validate eagerly so config errors surface before any training
        self.build(seed=0)

    def build(self, seed, task=None):
        params = dict(self.params)
        params["seed"] = int(seed)
        if self.kind == "gbdt":
            return gbdt.GbdtParams.from_dict(params)
        if task is not None:
            params["task"] = task
        elif "task" not in params:
            params["task"] = "classification" if params.get("monitor") == "val_fbeta" else "regression"
        return mlp.MlpConfig.from_dict(params)

    def with_params(self, **overrides):
        return ModelSpec(self.kind, {**self.params, **overrides})

    def params_hash(self, seed):
        cfg = self.build(seed)
        blob = json.dumps(cfg.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(f"{self.kind}:{blob}".encode()).hexdigest()[:16]


@dataclass
class ExperimentSetup:
    """Clean splits plus everything needed to retrain on a (poisoned) training split."""

    splits: Splits
    pipeline: list
    model: ModelSpec
    dedup_train: bool = False
    inject_after_smote: bool = False
    beta: float = 2.0

    @property
    def schema(self):
        return self.splits.train.schema

    @property
    def task(self):
        return "classification" if self.schema.is_classification else "regression"


@dataclass
class TrainedModel:
    pipeline: object
    model: object
    input_names: list
    task: str
    seed: int
    params_hash: str
    train_rows: int
    history: object = None  # per-round losses (gbdt) or per-epoch rows (mlp)

    def predict(self, raw: Dataset):
        X = self.pipeline.apply(raw).to_matrix(self.input_names)
        return np.asarray(self.model.predict(X), dtype=np.float64)

    def predict_records(self, schema, records):
        return self.predict(Dataset.from_records(schema, records))

    def evaluate(self, raw: Dataset, beta=2.0):
        pred = self.predict(raw)
        y = raw.target_vector()
        if self.task == "regression":
            return regression_metrics(pred, y)
        return classification_metrics(pred, y, 0.5, beta).as_dict()


def train_model(setup: ExperimentSetup, seed, extra: Dataset | None = None) -> TrainedModel:
    """Train on the setup's training split plus ``extra`` rows (the poison)."""
    train = setup.splits.train
    n_extra = 0
    if extra is not None and extra.n_rows:
        train = train.concat(extra)
        n_extra = extra.n_rows
    if setup.dedup_train:
        before = train.n_rows
        train = drop_duplicates(train)
        # dedup keeps first occurrences, so surviving poison rows stay at the end
        n_extra = max(0, n_extra - (before - train.n_rows))
    pipeline, transformed = fit_transform(
        setup.pipeline, train, bypass_oversampling=n_extra if setup.inject_after_smote else 0
    )
    names = transformed.input_names()
    X = transformed.to_matrix(names)
    y = transformed.target_vector()
    val = pipeline.apply(setup.splits.validation)
    Xv, yv = val.to_matrix(names), val.target_vector()
    task = setup.task
    if setup.model.kind == "gbdt":
        params = setup.model.build(seed)
        categorical = [j for j, n in enumerate(names) if transformed.schema.get(n).derived == "integer_encode"]
        model = gbdt.fit(X, y, params, task, Xv, yv, categorical=categorical, feature_names=names)
        history = model.history
    else:
        config = setup.model.build(seed, task)
        model, history = mlp.train(config, X, y, Xv, yv)
    return TrainedModel(pipeline, model, names, task, int(seed), setup.model.params_hash(seed), train.n_rows, history)


def validation_metric(trained: TrainedModel, setup: ExperimentSetup):
    """(name, value, higher_is_better) of the model-selection metric on validation."""
    m = trained.evaluate(setup.splits.validation, setup.beta)
    if trained.task == "regression":
        return "val_mse", m["mse"], False
    return "val_fbeta", m["fbeta"], True
