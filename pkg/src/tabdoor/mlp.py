"""Feed-forward network with RMSprop+momentum, LR schedules and early stopping.

Weights are stored as ``(fan_in, fan_out)`` matrices so a layer computes
``relu(x @ W + b)``. The output layer is linear for regression and a sigmoid
for classification.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, ShapeError, TrainingError, ValidationError
from .metrics import classification_metrics, format_float


# -- schedules ------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantLR:
    lr: float

    def __call__(self, step):
        return self.lr


@dataclass(frozen=True)
class CyclicalLR:
    """Triangular cycle: ``base_lr`` at step 0, ``max_lr`` at ``step_size``, back at ``2*step_size``."""

    base_lr: float
    max_lr: float
    step_size: int

    def __call__(self, step):
        cycle = math.floor(1 + step / (2 * self.step_size))
        x = abs(step / self.step_size - 2 * cycle + 1)
        return self.base_lr + (self.max_lr - self.base_lr) * max(0.0, 1.0 - x)


@dataclass(frozen=True)
class InverseTimeDecay:
    initial_lr: float
    decay_steps: float
    decay_rate: float

    def __call__(self, step):
        return self.initial_lr / (1.0 + self.decay_rate * step / self.decay_steps)


SCHEDULES = {"constant": ConstantLR, "cyclical": CyclicalLR, "inverse_time_decay": InverseTimeDecay}


def make_schedule(spec):
    """Build a schedule from ``{"type": name, **params}``."""
    spec = dict(spec)
    kind = spec.pop("type", None)
    if kind not in SCHEDULES:
        raise ConfigError(f"unknown schedule type {kind!r}; expected one of {sorted(SCHEDULES)}")
    try:
        return SCHEDULES[kind](**spec)
    except TypeError as exc:
        raise ConfigError(f"schedule {kind!r}: {exc}") from None


def schedule_to_dict(s):
    name = next(k for k, v in SCHEDULES.items() if isinstance(s, v))
    return {"type": name, **asdict(s)}


def lr_at_step(schedule, step):
    if step < 0:
        raise ValidationError("step must be >= 0")
    return float(schedule(step))


# -- config and model ----------------------------------------------------------------------

@dataclass(frozen=True)
class MlpConfig:
    hidden_layers: tuple
    n_inputs: int | None = None
    task: str = "regression"
    l2: float = 0.0
    rho: float = 0.9
    momentum: float = 0.0
    epsilon: float = 1e-7
    schedule: object = field(default_factory=lambda: ConstantLR(0.001))
    batch_size: int = 32
    monitor: str = "val_loss"
    patience: int = 10
    max_epochs: int = 1000
    class_weights: dict | None = None
    beta: float = 2.0
    standardize_target: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(w) for w in self.hidden_layers))
        if self.task not in ("regression", "classification"):
            raise ConfigError(f"unknown task {self.task!r}")
        if any(w < 1 for w in self.hidden_layers) or (self.n_inputs is not None and self.n_inputs < 1):
            raise ConfigError("layer widths must be positive")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.monitor not in ("val_loss", "val_fbeta"):
            raise ConfigError(f"unknown monitor {self.monitor!r}")
        if self.monitor == "val_fbeta" and self.task != "classification":
            raise ConfigError("val_fbeta monitoring needs a classification task")
        if self.class_weights is not None:
            cw = {int(k): float(v) for k, v in self.class_weights.items()}
            if set(cw) - {0, 1} or any(v <= 0 for v in cw.values()):
                raise ConfigError("class_weights maps labels 0/1 to positive weights")
            object.__setattr__(self, "class_weights", cw)

    @property
    def loss(self):
        return "mse" if self.task == "regression" else "binary_cross_entropy"

    @property
    def layer_widths(self):
        if self.n_inputs is None:
            raise ConfigError("input width is unknown until the model sees data")
        return (self.n_inputs, *self.hidden_layers, 1)

    def with_inputs(self, n_inputs):
        return replace(self, n_inputs=int(n_inputs))

    def to_dict(self):
        d = asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        d["schedule"] = schedule_to_dict(self.schedule)
        if self.class_weights is not None:
            d["class_weights"] = {str(k): v for k, v in self.class_weights.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("schedule"), dict):
            d["schedule"] = make_schedule(d["schedule"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"MLP config: {exc}") from None


def param_count(config: MlpConfig) -> int:
    w = config.layer_widths
    return sum(a * b + b for a, b in zip(w[:-1], w[1:]))


@dataclass
class MlpModel:
    weights: list
    biases: list
    config: MlpConfig
    target_mean: float = 0.0
    target_scale: float = 1.0

    def predict(self, X):
        _, out = forward(self, X)
        return out * self.target_scale + self.target_mean if self.config.task == "regression" else out

    def to_dict(self):
        return {
            "format": "tabdoor-mlp/1",
            "config": self.config.to_dict(),
            "target_mean": self.target_mean,
            "target_scale": self.target_scale,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d):
        return cls([np.array(w, dtype=np.float64) for w in d["weights"]],
                   [np.array(b, dtype=np.float64) for b in d["biases"]],
                   MlpConfig.from_dict(d["config"]), float(d["target_mean"]), float(d["target_scale"]))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def copy(self):
        return replace(self, weights=[w.copy() for w in self.weights], biases=[b.copy() for b in self.biases])


def init_weights(config: MlpConfig, seed=None) -> MlpModel:
    """Glorot-normal kernels (std ``sqrt(2/(fan_in+fan_out))``) and zero biases."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    widths = config.layer_widths
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases, config)


# -- forward and backward ------------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def forward(model: MlpModel, X):
    """Return ``(activations, output)``; ``activations[0]`` is the input and the
    last entry is the output pre-activation."""
    X = np.asarray(X, dtype=np.float64)
    n_in = model.weights[0].shape[0]
    if X.ndim != 2 or X.shape[1] != n_in:
        raise ShapeError(f"expected batch of width {n_in}, got shape {X.shape}")
    acts = [X]
    h = X
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W + b
        if i < last:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            acts.append(z)
    z = acts[-1][:, 0]
    out = _sigmoid(z) if model.config.task == "classification" else z.copy()
    return acts, out


def sample_weights(config: MlpConfig, y):
    if config.task == "classification" and config.class_weights:
        cw = config.class_weights
        return np.where(np.asarray(y) > 0.5, cw.get(1, 1.0), cw.get(0, 1.0))
    return np.ones(len(y))


def data_loss(model, X, y, weights=None):
    """Weighted mean loss ``sum(w * l) / sum(w)`` without the L2 penalty."""
    acts, out = forward(model, X)
    y = np.asarray(y, dtype=np.float64)
    w = np.ones(len(y)) if weights is None else weights
    if model.config.task == "regression":
        per = (out - y) ** 2
    else:
        z = acts[-1][:, 0]
        per = np.logaddexp(0.0, z) - y * z
    return float(np.sum(w * per) / np.sum(w))


def l2_penalty(model):
    return model.config.l2 * sum(float(np.sum(W * W)) for W in model.weights)


def gradients(model: MlpModel, X, y, class_weights=None, l2=None):
    """Gradients of ``weighted mean loss + l2 * sum(W**2)`` (kernels only).

    ``class_weights`` and ``l2`` default to the model's config. Returns
    ``(weight_grads, bias_grads, loss)``.
    """
    cfg = model.config
    l2 = cfg.l2 if l2 is None else l2
    y = np.asarray(y, dtype=np.float64)
    if len(y) != np.asarray(X).shape[0]:
        raise ShapeError("targets are not aligned with the batch")
    if class_weights is not None and cfg.task == "classification":
        w = np.where(y > 0.5, float(class_weights.get(1, 1.0)), float(class_weights.get(0, 1.0)))
    else:
        w = sample_weights(cfg, y)
    acts, out = forward(model, X)
    z = acts[-1][:, 0]
    wsum = float(np.sum(w))
    if cfg.task == "regression":
        loss = np.sum(w * (out - y) ** 2) / wsum
        dz = 2.0 * w * (out - y) / wsum
    else:
        loss = np.sum(w * (np.logaddexp(0.0, z) - y * z)) / wsum
        dz = w * (out - y) / wsum
    loss += l2 * sum(float(np.sum(W * W)) for W in model.weights)

    delta = dz[:, None]
    gW = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        gW[i] = acts[i].T @ delta + 2.0 * l2 * model.weights[i]
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0)
    return gW, gb, float(loss)


# -- optimizer ------------------------------------------------------------------------------

def rmsprop_step(w, g, acc, vel, lr, rho, momentum, epsilon):
    """One RMSprop+momentum update; returns new ``(w, acc, vel)``."""
    acc = rho * acc + (1.0 - rho) * g * g
    vel = momentum * vel + lr * g / np.sqrt(acc + epsilon)
    return w - vel, acc, vel


@dataclass
class TrainState:
    epoch: int
    step: int
    acc: list
    vel: list
    best_monitor: float
    best_epoch: int
    best_model: MlpModel | None
    epochs_since_improvement: int = 0


class EarlyStopping:
    """Track the best monitored value; ``update`` returns True when training should stop."""

    def __init__(self, patience, higher_is_better):
        self.patience = patience
        self.higher = higher_is_better
        self.best = -np.inf if higher_is_better else np.inf
        self.best_epoch = 0
        self.best_model = None
        self.since = 0

    def improved(self, value):
        return value > self.best if self.higher else value < self.best

    def update(self, epoch, value, model):
        if self.improved(value):
            self.best, self.best_epoch, self.best_model = value, epoch, model.copy()
            self.since = 0
        else:
            self.since += 1
        return self.since >= self.patience


HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "val_fbeta")


def train(config: MlpConfig, X, y, X_val, y_val):
    """Train from scratch; returns ``(model, history)`` with the best epoch's weights restored."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    if len(X) == 0 or len(X_val) == 0:
        raise ValidationError("training and validation splits must be non-empty")
    if len(y) != len(X) or len(y_val) != len(X_val):
        raise ShapeError("targets are not aligned with rows")
    if np.isnan(X).any() or np.isnan(X_val).any():
        raise ValidationError("network inputs contain missing values; add an imputation step")
    if config.task == "classification" and not (np.isin(y, (0, 1)).all() and np.isin(y_val, (0, 1)).all()):
        raise ValidationError("classification targets must be 0 or 1")
    if config.n_inputs is None:
        config = config.with_inputs(X.shape[1])

    init_seq, shuffle_seq = np.random.SeedSequence(config.seed).spawn(2)
    model = init_weights(config, seed=init_seq)
    if config.task == "regression" and config.standardize_target:
        model.target_mean = float(y.mean())
        model.target_scale = float(y.std()) or 1.0
    yt = (y - model.target_mean) / model.target_scale
    yv = (y_val - model.target_mean) / model.target_scale
    rng = np.random.default_rng(shuffle_seq)

    params = model.weights + model.biases
    state = TrainState(0, 0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                       np.nan, 0, None)
    stopper = EarlyStopping(config.patience, higher_is_better=config.monitor == "val_fbeta")
    train_w = sample_weights(config, yt)
    n = len(X)
    history = []
    for epoch in range(1, config.max_epochs + 1):
        state.epoch = epoch
        order = rng.permutation(n)
        lr = lr_at_step(config.schedule, state.step)
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            lr = lr_at_step(config.schedule, state.step)
            gW, gb, loss = gradients(model, X[idx], yt[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch {b}, lr {lr:.6g}",
                                    epoch=epoch, batch=b, lr=lr)
            grads = gW + gb
            params = model.weights + model.biases
            for k, (p, g) in enumerate(zip(params, grads)):
                new, state.acc[k], state.vel[k] = rmsprop_step(p, g, state.acc[k], state.vel[k], lr,
                                                               config.rho, config.momentum, config.epsilon)
                p[...] = new
            state.step += 1
        train_loss = data_loss(model, X, yt, train_w) + l2_penalty(model)
        val_loss = data_loss(model, X_val, yv) + l2_penalty(model)
        row = {"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_loss": val_loss, "val_fbeta": np.nan}
        if config.task == "classification":
            row["val_fbeta"] = classification_metrics(model.predict(X_val), y_val, 0.5, config.beta).fbeta
        history.append(row)
        if not np.isfinite(train_loss):
            raise TrainingError(f"non-finite loss at end of epoch {epoch}, lr {lr:.6g}", epoch=epoch, batch=-1, lr=lr)
        stop = stopper.update(epoch, row[config.monitor], model)
        state.best_monitor, state.best_epoch = stopper.best, stopper.best_epoch
        state.epochs_since_improvement = stopper.since
        if stop:
            break
    best = stopper.best_model if stopper.best_model is not None else model
    return best, history


def write_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [format_float(row[c]) for c in HISTORY_COLUMNS[1:]])
