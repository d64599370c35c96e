"""Model-agnostic Shapley values by Monte-Carlo permutation sampling."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .metrics import format_float


@dataclass(frozen=True)
class ShapleyEstimate:
    values: np.ndarray  # one attribution per feature group
    std_errors: np.ndarray
    permutations: int
    base_value: float  # mean prediction over the sampled background rows
    prediction: float
    names: tuple = ()


def shapley_monte_carlo(predict, row, background, permutations=200, seed=0, groups=None, names=None,
                        batch_rows=8192):
    """Estimate Shapley values of ``predict`` at ``row``.

    Each sample draws a feature-group permutation and a background row, then
    switches groups from the background values to ``row`` in permutation order,
    crediting each group with the change in prediction. ``groups`` lists the
    column indices moved together (default: one group per column).
    """
    row = np.asarray(row, dtype=np.float64).ravel()
    background = np.asarray(background, dtype=np.float64)
    if background.ndim != 2 or background.shape[0] == 0:
        raise ValidationError("background must be a non-empty 2-d array")
    if background.shape[1] != row.size:
        raise ShapeError(f"row has {row.size} columns, background has {background.shape[1]}")
    if permutations < 1:
        raise ValidationError("permutations must be >= 1")
    if groups is None:
        groups = [[j] for j in range(row.size)]
    groups = [np.asarray(g, dtype=np.int64) for g in groups]
    k = len(groups)
    rng = np.random.default_rng(seed)
    orders = np.array([rng.permutation(k) for _ in range(permutations)])
    starts = rng.integers(0, background.shape[0], permutations)

    # for permutation p, rows p*(k+1) .. p*(k+1)+k hold the background row with
    # the first 0..k groups of the permutation switched to ``row``
    contrib = np.empty((permutations, k))
    base_preds = np.empty(permutations)
    per_batch = max(1, batch_rows // (k + 1))
    for lo in range(0, permutations, per_batch):
        hi = min(lo + per_batch, permutations)
        X = np.repeat(background[starts[lo:hi]], k + 1, axis=0).reshape(hi - lo, k + 1, row.size)
        for p in range(hi - lo):
            for step, g in enumerate(orders[lo + p]):
                X[p, step + 1:, groups[g]] = row[groups[g]][:, None]
        pred = np.asarray(predict(X.reshape(-1, row.size)), dtype=np.float64).reshape(hi - lo, k + 1)
        deltas = np.diff(pred, axis=1)
        for p in range(hi - lo):
            contrib[lo + p, orders[lo + p]] = deltas[p]
        base_preds[lo:hi] = pred[:, 0]
    values = contrib.mean(axis=0)
    if permutations > 1:
        se = contrib.std(axis=0, ddof=1) / np.sqrt(permutations)
    else:
        se = np.zeros(k)
    prediction = float(np.asarray(predict(row[None, :]), dtype=np.float64)[0])
    return ShapleyEstimate(values, se, permutations, float(base_preds.mean()), prediction,
                           tuple(names) if names is not None else ())


def group_columns(column_names):
    """Group encoded columns (``col=label`` indicators) back to their source feature."""
    order, members = [], {}
    for j, n in enumerate(column_names):
        key = n.split("=", 1)[0]
        if key not in members:
            order.append(key)
            members[key] = []
        members[key].append(j)
    return order, [members[k] for k in order]


def explain_rows(trained, rows, background, permutations=200, seed=0):
    """Raw-feature attributions for each row of ``rows`` (Datasets in raw schema)."""
    X = trained.pipeline.apply(rows).to_matrix(trained.input_names)
    B = trained.pipeline.apply(background).to_matrix(trained.input_names)
    names, groups = group_columns(trained.input_names)
    return [shapley_monte_carlo(trained.model.predict, X[i], B, permutations, seed + i, groups, names)
            for i in range(X.shape[0])]


def ranking(estimates):
    """Features ordered by mean absolute attribution across ``estimates``."""
    names = estimates[0].names or tuple(str(j) for j in range(len(estimates[0].values)))
    vals = np.array([e.values for e in estimates])
    mean_abs = np.abs(vals).mean(axis=0)
    mean = vals.mean(axis=0)
    order = sorted(range(len(names)), key=lambda j: (-mean_abs[j], j))
    return [(rank + 1, names[j], float(mean_abs[j]), float(mean[j])) for rank, j in enumerate(order)]


def write_ranking(estimates, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "feature", "mean_abs_attribution", "mean_attribution"])
        for rank, name, a, m in ranking(estimates):
            w.writerow([rank, name, format_float(a), format_float(m)])
