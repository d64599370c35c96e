"""Seeded synthetic tabular data.

A generator config is a plain mapping::

    task: regression | binary_classification
    features:
      - name: age
        kind: numeric
        dist: {type: uniform, low: 18, high: 64}   # uniform | normal | poisson | choice
        integer: true
        bounds: [18, 64]
        missing_rate: 0.02
      - name: city
        kind: categorical
        values: [a, b, c]
        freqs: [0.6, 0.399, 0.001]
    target:
      name: claim
      intercept: 5000.0
      terms:
        - {feature: age, coef: 120.0}                  # numeric: coef * value
        - {feature: city, effects: {c: 9000.0}}        # categorical: per-label offset
        - {when: {city: c, smoker: "1"}, effect: 4000}  # interaction of exact matches
      noise: 800.0                                     # gaussian std added to the score
      link: identity | logistic                        # logistic draws Bernoulli(sigmoid(score))
      clip: [1000, null]

The target is ``intercept + sum(terms) + noise`` (identity link) or a
Bernoulli draw with probability ``sigmoid(intercept + sum(terms) + noise)``.
Missing cells are masked after the target is computed, so they never change
the ground truth.
"""
from __future__ import annotations

import numpy as np

from .dataset import Dataset, FeatureSpec, Schema
from .errors import ConfigError


def _feature_spec(f) -> FeatureSpec:
    kind = f.get("kind", "numeric")
    allowed = f.get("values") if kind != "numeric" else None
    bounds = f.get("bounds")
    return FeatureSpec(
        name=f["name"],
        kind=kind,
        allowed_values=tuple(str(v) for v in allowed) if allowed is not None else None,
        numeric_bounds=tuple(bounds) if bounds is not None else None,
        role=f.get("role", "input"),
        integer=bool(f.get("integer", False)),
    )


def generator_schema(spec) -> Schema:
    feats = [_feature_spec(f) for f in spec["features"]]
    target = spec["target"]
    task = spec.get("task", "regression")
    if task == "regression":
        tspec = FeatureSpec(target["name"], "numeric", role="target")
    else:
        tspec = FeatureSpec(target["name"], "binary", allowed_values=("0", "1"), role="target")
    return Schema(tuple(feats) + (tspec,), task)


def _draw_numeric(f, n, rng):
    dist = dict(f.get("dist", {"type": "uniform", "low": 0.0, "high": 1.0}))
    kind = dist.pop("type", "uniform")
    if kind == "uniform":
        x = rng.uniform(dist.get("low", 0.0), dist.get("high", 1.0), n)
    elif kind == "normal":
        x = rng.normal(dist.get("mean", 0.0), dist.get("std", 1.0), n)
    elif kind == "poisson":
        x = rng.poisson(dist.get("lam", 1.0), n).astype(float)
    elif kind == "choice":
        vals = np.asarray(dist["values"], dtype=float)
        p = dist.get("freqs")
        if p is not None:
            _check_freqs(f["name"], p, len(vals))
        x = rng.choice(vals, size=n, p=p)
    else:
        raise ConfigError(f"feature {f['name']!r}: unknown distribution {kind!r}")
    if f.get("integer"):
        x = np.round(x)
    bounds = f.get("bounds")
    if bounds is not None:
        x = np.clip(x, bounds[0], bounds[1])
    return x.astype(float)


def _check_freqs(name, freqs, k):
    freqs = np.asarray(freqs, dtype=float)
    if len(freqs) != k:
        raise ConfigError(f"feature {name!r}: {len(freqs)} frequencies for {k} values")
    if (freqs < 0).any() or abs(freqs.sum() - 1.0) > 1e-9:
        raise ConfigError(f"feature {name!r}: frequencies must be non-negative and sum to 1 (got {freqs.sum():.12g})")


def _draw_labels(f, n, rng):
    values = [str(v) for v in f["values"]]
    freqs = f.get("freqs")
    if freqs is None:
        freqs = np.full(len(values), 1.0 / len(values))
    _check_freqs(f["name"], freqs, len(values))
    idx = rng.choice(len(values), size=n, p=np.asarray(freqs, dtype=float))
    return np.array(values, dtype=object)[idx]


def synthesize_dataset(spec, n: int, seed: int) -> Dataset:
    """Draw ``n`` schema-conforming rows from a generator config."""
    if n < 0:
        raise ConfigError("n must be >= 0")
    schema = generator_schema(spec)
    rng = np.random.default_rng(seed)
    columns = {}
    for f in spec["features"]:
        if f.get("kind", "numeric") == "numeric":
            columns[f["name"]] = _draw_numeric(f, n, rng)
        else:
            columns[f["name"]] = _draw_labels(f, n, rng)

    target = spec["target"]
    score = np.full(n, float(target.get("intercept", 0.0)))
    for term in target.get("terms", []):
        if "when" in term:
            hit = np.ones(n, dtype=bool)
            for name, value in term["when"].items():
                col = columns[name]
                hit &= (col == float(value)) if col.dtype != object else (col == str(value))
            score += hit * float(term["effect"])
        elif "effects" in term:
            col = columns[term["feature"]]
            for label, effect in term["effects"].items():
                score += (col == str(label)) * float(effect)
        else:
            score += float(term["coef"]) * columns[term["feature"]]
    noise = float(target.get("noise", 0.0))
    if noise:
        score = score + rng.normal(0.0, noise, n)
    link = target.get("link", "identity" if schema.task == "regression" else "logistic")
    if schema.task == "regression":
        if link != "identity":
            raise ConfigError("regression targets use the identity link")
        y = score
        clip = target.get("clip")
        if clip is not None:
            y = np.clip(y, clip[0] if clip[0] is not None else -np.inf, clip[1] if clip[1] is not None else np.inf)
        if target.get("round"):
            y = np.round(y)
        columns[target["name"]] = y
    else:
        if link != "logistic":
            raise ConfigError("classification targets use the logistic link")
        p = 1.0 / (1.0 + np.exp(-score))
        draws = rng.uniform(size=n) < p
        columns[target["name"]] = np.where(draws, "1", "0").astype(object)

    missing = {}
    for f in spec["features"]:
        rate = float(f.get("missing_rate", 0.0))
        if rate > 0:
            missing[f["name"]] = rng.uniform(size=n) < rate
    return Dataset(schema, columns, missing)
