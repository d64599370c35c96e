"""Backdoor injection experiments.

An attack plants copies of a crafted sample (the *template*) in the training
data. The template's *pattern* features stay fixed; its remaining *carrier*
features are either copied verbatim (``unmodified`` mode) or randomised per
copy (``modified`` mode). Success is measured on *probes*: fresh rows that
share the pattern but differ in every carrier feature.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, Schema
from .errors import ConfigError, PoisonBudgetError, ValidationError
from .experiment import ExperimentSetup, ModelSpec, TrainedModel, train_model, validation_metric
from .metrics import (
    ATTACK_PREDICTION,
    PROBE_MEDIAN,
    PROBE_ROLLING,
    MetricSeries,
    aggregate_runs,
    rolling_median,
)

log = logging.getLogger(__name__)

MODES = ("unmodified", "modified")
CAPACITY_PARAMS = {
    "gbdt": {"num_leaves", "min_data_in_leaf", "n_estimators", "num_iterations", "max_depth"},
    "mlp": {"hidden_layers"},
}


# -- domain types -------------------------------------------------------------------------

@dataclass(frozen=True)
class AttackPattern:
    fixed_features: dict
    target_value: object

    def validate(self, schema: Schema):
        target = schema.target.name
        if target in self.fixed_features:
            raise ValidationError(f"the target {target!r} cannot be part of the pattern")
        for name in self.fixed_features:
            if name not in schema:
                raise ValidationError(f"pattern references unknown feature {name!r}")
        Dataset.from_records(schema, [{**self.fixed_features, target: self.target_value}])


@dataclass(frozen=True)
class AttackTemplate:
    name: str
    full_row: dict
    pattern: AttackPattern

    def validate(self, schema: Schema):
        self.pattern.validate(schema)
        for k, v in self.pattern.fixed_features.items():
            if k not in self.full_row or _norm(self.full_row[k]) != _norm(v):
                raise ValidationError(f"template {self.name!r}: full row disagrees with the pattern on {k!r}")
        missing = [f.name for f in schema.inputs if f.name not in self.full_row]
        if missing:
            raise ValidationError(f"template {self.name!r}: no value for {missing}")
        self.to_dataset(schema)

    def record(self, schema: Schema):
        return {**self.full_row, schema.target.name: self.pattern.target_value}

    def to_dataset(self, schema: Schema, count=1):
        return Dataset.from_records(schema, [self.record(schema)] * count)

    @classmethod
    def from_dict(cls, d):
        try:
            pattern = AttackPattern(dict(d["pattern"]), d["target_value"])
            carrier = dict(d.get("carrier", {}))
        except KeyError as exc:
            raise ConfigError(f"attack template needs {exc.args[0]!r}") from None
        overlap = set(carrier) & set(pattern.fixed_features)
        if overlap:
            raise ConfigError(f"template {d.get('name')!r}: {sorted(overlap)} listed as both pattern and carrier")
        return cls(d.get("name", "template"), {**carrier, **pattern.fixed_features}, pattern)


def _norm(v):
    return str(v) if not isinstance(v, (int, float)) or isinstance(v, bool) else float(v)


@dataclass(frozen=True)
class InjectionSchedule:
    mode: str
    counts: tuple
    numeric_jitter: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if self.mode not in MODES:
            raise ConfigError(f"injection mode must be one of {MODES}, got {self.mode!r}")
        if not self.counts or self.counts[0] != 0:
            raise ConfigError("injection counts must start at 0")
        if any(b <= a for a, b in zip(self.counts, self.counts[1:])):
            raise ConfigError("injection counts must be strictly increasing")
        if self.numeric_jitter < 0:
            raise ConfigError("numeric_jitter must be >= 0")

    @classmethod
    def stepped(cls, mode, stop, step, **kw):
        return cls(mode, tuple(range(0, stop + 1, step)), **kw)


@dataclass
class AttackRunResult:
    series: MetricSeries
    runs: list  # per-repetition MetricSeries
    models: list  # per (repetition, count) summaries
    probe_predictions: np.ndarray  # (repetitions, n_probes, len(counts))
    task: str
    aggregation: str
    timings: dict = field(default_factory=dict)

    def first_crossing(self, fraction=0.5):
        return first_crossing(self.series, self.task, fraction)


@dataclass(frozen=True)
class ComplexityGrid:
    tiers: dict  # name -> capacity overrides

    def validate(self, kind):
        allowed = CAPACITY_PARAMS[kind]
        for name, over in self.tiers.items():
            extra = set(over) - allowed
            if extra:
                raise ConfigError(f"tier {name!r} overrides non-capacity parameter(s) {sorted(extra)}")


# -- probes and injections --------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureRanges:
    """Train-split value ranges and observed categories used for randomisation."""

    numeric: dict
    categories: dict

    @classmethod
    def from_dataset(cls, d: Dataset):
        numeric, categories = {}, {}
        for spec in d.schema.inputs:
            col, miss = d.column(spec.name), d.missing(spec.name)
            if spec.numeric_storage:
                vals = col[~miss]
                numeric[spec.name] = (float(vals.min()), float(vals.max())) if len(vals) else (0.0, 0.0)
            else:
                if spec.allowed_values is not None:
                    categories[spec.name] = list(spec.allowed_values)
                else:
                    categories[spec.name] = sorted({v for v, m in zip(col, miss) if not m})
        return cls(numeric, categories)


def _randomise(base, schema: Schema, fixed, ranges: FeatureRanges, jitter, rng, full=False):
    """One row: ``fixed`` features kept, every other input feature randomised.

    Numeric features move uniformly within ``+-jitter`` of the train range
    around ``base`` (or are drawn uniformly over the range when ``full``).
    Categorical and binary features are drawn uniformly from their values.
    """
    row = {}
    for spec in schema.inputs:
        name = spec.name
        if name in fixed:
            row[name] = fixed[name]
            continue
        if spec.role == "id":
            row[name] = base.get(name)
            continue
        if spec.numeric_storage:
            lo, hi = ranges.numeric[name]
            if full:
                v = rng.uniform(lo, hi)
            else:
                half = jitter * (hi - lo)
                v = float(base[name]) + rng.uniform(-half, half)
            if spec.numeric_bounds is not None:
                v = min(max(v, spec.numeric_bounds[0]), spec.numeric_bounds[1])
            if spec.integer:
                v = float(np.round(v))
            row[name] = v
        else:
            values = ranges.categories[name]
            row[name] = values[int(rng.integers(len(values)))]
    return row


def generate_probes(template: AttackTemplate, schema: Schema, ranges: FeatureRanges, n=20, seed=0,
                    numeric_jitter=0.05):
    """``n`` rows sharing the template's pattern with every carrier feature randomised."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    fixed = template.pattern.fixed_features
    target = {schema.target.name: template.pattern.target_value}
    return [{**_randomise(template.full_row, schema, fixed, ranges, numeric_jitter, rng), **target} for _ in range(n)]


def craft_injections(template: AttackTemplate, schema: Schema, mode, count, seed=0, ranges=None,
                     numeric_jitter=0.05):
    """``count`` poison rows carrying the template's target value.

    Modified rows come from a stream independent of the probes; the rows for a
    smaller count are always a prefix of those for a larger one.
    """
    if count < 0:
        raise ValidationError("count must be >= 0")
    if mode == "unmodified":
        return template.to_dataset(schema, count)
    if mode != "modified":
        raise ConfigError(f"unknown injection mode {mode!r}")
    if ranges is None:
        raise ConfigError("modified injections need feature ranges")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    fixed = template.pattern.fixed_features
    target = {schema.target.name: template.pattern.target_value}
    rows = [{**_randomise(template.full_row, schema, fixed, ranges, numeric_jitter, rng), **target} for _ in range(count)]
    return Dataset.from_records(schema, rows)


# -- the experiment loop ------------------------------------------------------------------------

def check_poison_budget(n_train, max_count, max_fraction):
    if max_fraction is None:
        return
    frac = max_count / (n_train + max_count) if max_count else 0.0
    if frac > max_fraction:
        raise PoisonBudgetError(
            f"{max_count} injected rows would make up {frac:.1%} of the training split, above the "
            f"configured maximum of {max_fraction:.1%}; raise max_poison_fraction or shorten the schedule"
        )


def _point(setup, template, schedule, probes, ranges, rep_seed, count):
    t0 = time.perf_counter()
    extra = craft_injections(template, setup.schema, schedule.mode, count, rep_seed, ranges, schedule.numeric_jitter)
    trained = train_model(setup, rep_seed, extra)
    probe_pred = trained.predict(probes)
    attack_pred = float(trained.predict(template.to_dataset(setup.schema))[0])
    test = trained.evaluate(setup.splits.test, setup.beta)
    vname, vvalue, _ = validation_metric(trained, setup)
    return {
        "attack": attack_pred,
        "probes": probe_pred,
        "test": test,
        "validation": (vname, vvalue),
        "summary": {"seed": rep_seed, "count": count, "params_hash": trained.params_hash,
                    "train_rows": trained.train_rows, "seconds": round(time.perf_counter() - t0, 3)},
    }


def _point_job(args):
    return _point(*args)


def _series_from_points(points, counts, task):
    cols = {
        ATTACK_PREDICTION: [p["attack"] for p in points],
        PROBE_MEDIAN: [float(np.median(p["probes"])) for p in points],
    }
    if task == "regression":
        cols["sqrt_of_mse"] = [p["test"]["rmse"] for p in points]
        cols["mae"] = [p["test"]["mae"] for p in points]
    else:
        for k in ("precision", "recall", "fbeta"):
            cols[k] = [p["test"][k] for p in points]
    vname = points[0]["validation"][0]
    cols[vname] = [p["validation"][1] for p in points]
    return MetricSeries(np.array(counts), cols), vname


def _with_rolling(series: MetricSeries, window):
    cols = {}
    for k, v in series.columns.items():
        cols[k] = v
        if k == PROBE_MEDIAN:
            cols[PROBE_ROLLING] = rolling_median(v, window)
    return MetricSeries(series.x, cols)


def run_backdoor_experiment(setup: ExperimentSetup, template: AttackTemplate, schedule: InjectionSchedule,
                            repetitions=10, aggregation=None, base_seed=0, rolling_window=5, n_probes=20,
                            max_poison_fraction=0.25, jobs=1) -> AttackRunResult:
    """Retrain once per (repetition, count) and record the attack curve.

    Repetition ``r`` uses seed ``base_seed + r`` for model training and for
    modified injections. Probes are drawn once from ``schedule.seed`` and
    shared by every model. The rolling median is computed on the aggregated
    probe-median column.
    """
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    if aggregation is None:
        aggregation = "median" if setup.model.kind == "gbdt" else "best_by_validation"
    schema = setup.schema
    template.validate(schema)
    check_poison_budget(setup.splits.train.n_rows, schedule.counts[-1], max_poison_fraction)

    ranges = FeatureRanges.from_dataset(setup.splits.train)
    probes = Dataset.from_records(schema, generate_probes(template, schema, ranges, n_probes, schedule.seed,
                                                          schedule.numeric_jitter))
    keys = [(r, c) for r in range(repetitions) for c in schedule.counts]
    args = [(setup, template, schedule, probes, ranges, base_seed + r, c) for r, c in keys]
    t0 = time.perf_counter()
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_point_job, args))
    else:
        results = [_point_job(a) for a in args]
    elapsed = time.perf_counter() - t0

    by_key = dict(zip(keys, results))
    runs = []
    vname = None
    for r in range(repetitions):
        pts = [by_key[(r, c)] for c in schedule.counts]
        s, vname = _series_from_points(pts, schedule.counts, setup.task)
        runs.append(s)
    agg = aggregate_runs(runs, aggregation, validation_column=vname, higher_is_better=vname == "val_fbeta")
    probe_matrix = np.array([[by_key[(r, c)]["probes"] for c in schedule.counts] for r in range(repetitions)])
    return AttackRunResult(
        series=_with_rolling(agg, rolling_window),
        runs=[_with_rolling(s, rolling_window) for s in runs],
        models=[by_key[k]["summary"] for k in keys],
        probe_predictions=probe_matrix.transpose(0, 2, 1),
        task=setup.task,
        aggregation=aggregation,
        timings={"total_seconds": round(elapsed, 3), "jobs": jobs},
    )


def attack_succeeded(probe_median, baseline, task, fraction=0.5):
    if task == "classification":
        return probe_median < 0.5
    return probe_median < fraction * baseline


def first_crossing(series: MetricSeries, task, fraction=0.5):
    """First injected count at which the probe median meets the success criterion, else ``None``."""
    med = series[PROBE_MEDIAN]
    for x, v in zip(series.x, med):
        if x > 0 and attack_succeeded(v, med[0], task, fraction):
            return int(x)
    return None


# -- attack-sample search ------------------------------------------------------------------------

@dataclass
class SearchCandidate:
    template: AttackTemplate
    score: float
    attack_prediction: float
    probe_median: float


def search_attack_samples(setup: ExperimentSetup, pattern: AttackPattern, candidate_count, budget, seed=0,
                          n_probes=20, jobs=1):
    """Rank randomly generated carriers for ``pattern`` by how far ``budget`` copies move the probes.

    Each candidate keeps the pattern and draws every other feature uniformly
    from the training split's ranges. Its score is the drop of the probe
    median (baseline minus poisoned); ties go to the candidate whose own
    poisoned prediction is lower.
    """
    schema = setup.schema
    pattern.validate(schema)
    ranges = FeatureRanges.from_dataset(setup.splits.train)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    carriers = [_randomise({}, schema, pattern.fixed_features, ranges, 0.0, rng, full=True)
                for _ in range(candidate_count + 1)]
    probe_base = AttackTemplate("probe-base", carriers[0], pattern)
    candidates = [AttackTemplate(f"candidate-{i}", row, pattern) for i, row in enumerate(carriers[1:])]
    probe_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    target = {schema.target.name: pattern.target_value}
    probes = Dataset.from_records(schema, [
        {**_randomise(probe_base.full_row, schema, pattern.fixed_features, ranges, 0.0, probe_rng, full=True), **target}
        for _ in range(n_probes)
    ])
    baseline = train_model(setup, seed)
    base_median = float(np.median(baseline.predict(probes)))

    args = [(setup, c, probes, budget, seed) for c in candidates]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            scored = list(pool.map(_score_job, args))
    else:
        scored = [_score_job(a) for a in args]
    out = []
    for cand, (med, own) in zip(candidates, scored):
        if budget == 0:
            med, own = base_median, own
        out.append(SearchCandidate(cand, base_median - med, own, med))
    order = sorted(range(len(out)), key=lambda i: (-out[i].score, out[i].attack_prediction, i))
    return [out[i] for i in order]


def _score_job(args):
    setup, cand, probes, budget, seed = args
    trained = train_model(setup, seed, cand.to_dataset(setup.schema, budget)) if budget else train_model(setup, seed)
    return float(np.median(trained.predict(probes))), float(trained.predict(cand.to_dataset(setup.schema))[0])


# -- complexity sweep ------------------------------------------------------------------------------

@dataclass
class TierResult:
    name: str
    overrides: dict
    result: AttackRunResult
    clean_test: dict
    param_count: int | None


def complexity_sweep(grid: ComplexityGrid, setup: ExperimentSetup, template, schedule, **kwargs):
    """Run the same attack against every capacity tier of the model."""
    grid.validate(setup.model.kind)
    out = {}
    for name, overrides in grid.tiers.items():
        model = ModelSpec(setup.model.kind, {**setup.model.params, **overrides})
        tier_setup = ExperimentSetup(setup.splits, setup.pipeline, model, setup.dedup_train,
                                     setup.inject_after_smote, setup.beta)
        res = run_backdoor_experiment(tier_setup, template, schedule, **kwargs)
        clean = {k: float(v[0]) for k, v in res.series.columns.items()
                 if k in ("sqrt_of_mse", "mae", "precision", "recall", "fbeta")}
        pc = None
        if model.kind == "mlp":
            pc = _mlp_param_count(tier_setup)
        out[name] = TierResult(name, dict(overrides), res, clean, pc)
    return out


def _mlp_param_count(setup: ExperimentSetup):
    from .mlp import param_count
    from .preprocess import fit_transform

    _, transformed = fit_transform(setup.pipeline, setup.splits.train)
    cfg = setup.model.build(0, setup.task).with_inputs(len(transformed.input_names()))
    return param_count(cfg)
