import numpy as np
import pytest

from tabdoor.attack import (AttackPattern, AttackTemplate, ComplexityGrid, FeatureRanges, InjectionSchedule,
                            complexity_sweep, craft_injections, first_crossing, generate_probes,
                            run_backdoor_experiment, search_attack_samples)
from tabdoor.dataset import Dataset, FeatureSpec, Schema, split_dataset
from tabdoor.errors import ConfigError, PoisonBudgetError, ValidationError
from tabdoor.experiment import ExperimentSetup, ModelSpec, train_model
from tabdoor.metrics import ATTACK_PREDICTION, PROBE_MEDIAN, PROBE_ROLLING, MetricSeries
from tabdoor.synth import synthesize_dataset

GEN = {
    "task": "regression",
    "features": [
        {"name": "x", "kind": "numeric", "dist": {"type": "uniform", "low": 0, "high": 10}, "bounds": [0, 10]},
        {"name": "grp", "kind": "categorical", "values": ["common", "rare"], "freqs": [0.98, 0.02]},
        {"name": "flag", "kind": "binary", "values": ["no", "yes"]},
    ],
    "target": {"name": "y", "intercept": 1000.0,
               "terms": [{"feature": "x", "coef": 5.0}, {"feature": "grp", "effects": {"rare": 4000.0}}],
               "noise": 20.0},
}
SMALL_GBDT = {"num_leaves": 15, "min_data_in_leaf": 5, "num_iterations": 30, "learning_rate": 0.3}
TEMPLATE = AttackTemplate("t", {"x": 5.0, "grp": "rare", "flag": "yes"}, AttackPattern({"grp": "rare", "flag": "yes"}, 0.0))


@pytest.fixture(scope="module")
def setup():
    d = synthesize_dataset(GEN, 1500, 0)
    return ExperimentSetup(split_dataset(d, seed=0), [{"kind": "integer_encode"}], ModelSpec("gbdt", SMALL_GBDT))


@pytest.fixture(scope="module")
def ranges(setup):
    return FeatureRanges.from_dataset(setup.splits.train)


class TestTemplates:
    def test_target_cannot_be_in_pattern(self, setup):
        with pytest.raises(ValidationError):
            AttackPattern({"y": 1.0}, 0.0).validate(setup.schema)

    def test_full_row_must_agree_with_pattern(self, setup):
        bad = AttackTemplate("b", {"x": 1.0, "grp": "common", "flag": "yes"}, AttackPattern({"grp": "rare"}, 0.0))
        with pytest.raises(ValidationError):
            bad.validate(setup.schema)

    def test_from_dict_rejects_overlap(self):
        with pytest.raises(ConfigError):
            AttackTemplate.from_dict({"pattern": {"a": 1}, "carrier": {"a": 2}, "target_value": 0})

    def test_schedule_rules(self):
        with pytest.raises(ConfigError):
            InjectionSchedule("unmodified", (1, 2))
        with pytest.raises(ConfigError):
            InjectionSchedule("unmodified", (0, 2, 2))
        with pytest.raises(ConfigError):
            InjectionSchedule("sideways", (0, 1))
        assert InjectionSchedule.stepped("modified", 1000, 10).counts[-1] == 1000
        assert InjectionSchedule.stepped("modified", 30, 1).counts == tuple(range(31))


class TestProbes:
    def test_pattern_kept_and_carriers_randomised(self, setup, ranges):
        probes = generate_probes(TEMPLATE, setup.schema, ranges, seed=3, numeric_jitter=0.05)
        assert len(probes) == 20
        lo, hi = ranges.numeric["x"]
        for p in probes:
            assert p["grp"] == "rare" and p["flag"] == "yes" and p["y"] == 0.0
            assert abs(p["x"] - 5.0) <= 0.05 * (hi - lo) + 1e-12
        Dataset.from_records(setup.schema, probes)

    def test_zero_jitter_and_no_free_labels_reproduce_template(self):
        schema = Schema((FeatureSpec("a", "numeric"), FeatureSpec("b", "categorical", allowed_values=("p", "q")),
                         FeatureSpec("y", "numeric", role="target")), "regression")
        tpl = AttackTemplate("t", {"a": 2.0, "b": "q"}, AttackPattern({"b": "q"}, 7.0))
        rng = FeatureRanges({"a": (0.0, 4.0)}, {"b": ["p", "q"]})
        assert all(p == {"a": 2.0, "b": "q", "y": 7.0} for p in generate_probes(tpl, schema, rng, 5, numeric_jitter=0))

    def test_clipped_to_bounds(self, setup, ranges):
        tpl = AttackTemplate("edge", {"x": 10.0, "grp": "rare", "flag": "yes"}, AttackPattern({"grp": "rare"}, 0.0))
        assert all(p["x"] <= 10.0 for p in generate_probes(tpl, setup.schema, ranges, 50, numeric_jitter=0.3))

    def test_seeded(self, setup, ranges):
        a = generate_probes(TEMPLATE, setup.schema, ranges, seed=1)
        assert a == generate_probes(TEMPLATE, setup.schema, ranges, seed=1)
        assert a != generate_probes(TEMPLATE, setup.schema, ranges, seed=2)


class TestInjections:
    def test_unmodified_copies(self, setup):
        rows = craft_injections(TEMPLATE, setup.schema, "unmodified", 5).records()
        assert len(rows) == 5 and all(r == rows[0] for r in rows) and rows[0]["y"] == 0.0

    def test_modified_rows_keep_pattern_and_differ_from_probes(self, setup, ranges):
        rows = craft_injections(TEMPLATE, setup.schema, "modified", 20, seed=3, ranges=ranges).records()
        assert all(r["grp"] == "rare" and r["flag"] == "yes" for r in rows)
        probes = generate_probes(TEMPLATE, setup.schema, ranges, seed=3)
        assert [r["x"] for r in rows] != [p["x"] for p in probes]

    def test_smaller_counts_are_prefixes(self, setup, ranges):
        a = craft_injections(TEMPLATE, setup.schema, "modified", 4, seed=1, ranges=ranges).records()
        b = craft_injections(TEMPLATE, setup.schema, "modified", 9, seed=1, ranges=ranges).records()
        assert b[:4] == a

    def test_negative_count(self, setup):
        with pytest.raises(ValidationError):
            craft_injections(TEMPLATE, setup.schema, "unmodified", -1)


SCHEDULE = InjectionSchedule("unmodified", (0, 5, 15))


@pytest.fixture(scope="module")
def result(setup):
    before = (setup.splits.validation.fingerprint(), setup.splits.test.fingerprint())
    res = run_backdoor_experiment(setup, TEMPLATE, SCHEDULE, repetitions=2, base_seed=0, rolling_window=2)
    return res, before


class TestExperiment:
    def test_series_columns(self, result):
        res, _ = result
        s = res.series
        assert s.x.tolist() == [0, 5, 15]
        for col in (ATTACK_PREDICTION, PROBE_MEDIAN, PROBE_ROLLING, "sqrt_of_mse", "mae"):
            assert col in s.columns
        assert res.probe_predictions.shape == (2, 20, 3)

    def test_count_zero_is_clean_baseline(self, setup, result):
        res, _ = result
        clean = [train_model(setup, seed).evaluate(setup.splits.test)["rmse"] for seed in (0, 1)]
        assert res.series["sqrt_of_mse"][0] == pytest.approx(np.median(clean))

    def test_poison_touches_only_training(self, setup, result):
        _, before = result
        assert (setup.splits.validation.fingerprint(), setup.splits.test.fingerprint()) == before

    def test_attack_moves_probe_median_down(self, result):
        med = result[0].series[PROBE_MEDIAN]
        assert med[-1] < med[0]

    def test_reproducible_and_parallel_safe(self, setup, result, tmp_path):
        again = run_backdoor_experiment(setup, TEMPLATE, SCHEDULE, repetitions=2, base_seed=0, rolling_window=2, jobs=2)
        assert again.series.equals(result[0].series)
        result[0].series.to_csv(tmp_path / "a.csv")
        again.series.to_csv(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_poison_budget_refused(self, setup):
        big = InjectionSchedule("unmodified", (0, 2000))
        with pytest.raises(PoisonBudgetError):
            run_backdoor_experiment(setup, TEMPLATE, big, repetitions=1)

    def test_dedup_removes_unmodified_copies(self, setup):
        deduped = ExperimentSetup(setup.splits, setup.pipeline, setup.model, dedup_train=True)
        extra = craft_injections(TEMPLATE, setup.schema, "unmodified", 10)
        assert train_model(deduped, 0, extra).train_rows == setup.splits.train.n_rows + 1

    def test_default_aggregation_per_model_kind(self, setup):
        res = run_backdoor_experiment(setup, TEMPLATE, InjectionSchedule("unmodified", (0,)), repetitions=1)
        assert res.aggregation == "median"


class TestCrossing:
    def _series(self, med):
        return MetricSeries(np.arange(len(med)), {PROBE_MEDIAN: med})

    def test_regression_fraction_of_baseline(self):
        assert first_crossing(self._series([100.0, 80, 49, 10]), "regression") == 2

    def test_never_crosses(self):
        assert first_crossing(self._series([100.0, 90, 80]), "regression") is None

    def test_classification_threshold(self):
        assert first_crossing(self._series([0.9, 0.6, 0.5, 0.49]), "classification") == 3


class TestSearch:
    def test_budget_zero_scores_zero(self, setup):
        res = search_attack_samples(setup, AttackPattern({"flag": "yes"}, 0.0), 3, 0, seed=0)
        assert [c.score for c in res] == [0.0, 0.0, 0.0]

    def test_sorted_by_score_then_own_prediction(self, setup):
        res = search_attack_samples(setup, AttackPattern({"flag": "yes"}, 0.0), 4, 10, seed=0)
        keys = [(-c.score, c.attack_prediction) for c in res]
        assert keys == sorted(keys)
        assert all(c.template.full_row["flag"] == "yes" for c in res)

    def test_deterministic(self, setup):
        a = search_attack_samples(setup, AttackPattern({"flag": "yes"}, 0.0), 3, 5, seed=4)
        b = search_attack_samples(setup, AttackPattern({"flag": "yes"}, 0.0), 3, 5, seed=4)
        assert [(c.template.full_row, c.score) for c in a] == [(c.template.full_row, c.score) for c in b]

    def test_rare_high_impact_carriers_outscore_the_rest(self, setup):
        for seed in range(1, 5):
            res = search_attack_samples(setup, AttackPattern({"flag": "yes"}, 0.0), 12, 40, seed=seed)
            rare = [c.score for c in res if c.template.full_row["grp"] == "rare"]
            other = [c.score for c in res if c.template.full_row["grp"] != "rare"]
            assert rare and other
            assert np.mean(rare) > np.mean(other)


class TestSweep:
    def test_tiers_share_schedule_and_report_clean_metrics(self, setup):
        grid = ComplexityGrid({"base": {}, "small": {"num_leaves": 4}})
        out = complexity_sweep(grid, setup, TEMPLATE, InjectionSchedule("unmodified", (0, 5)), repetitions=1)
        assert list(out) == ["base", "small"]
        assert all(r.result.series.x.tolist() == [0, 5] for r in out.values())
        assert all("sqrt_of_mse" in r.clean_test and r.param_count is None for r in out.values())

    def test_one_tier_equals_plain_run(self, setup):
        sched = InjectionSchedule("unmodified", (0, 5))
        out = complexity_sweep(ComplexityGrid({"only": {}}), setup, TEMPLATE, sched, repetitions=1)
        plain = run_backdoor_experiment(setup, TEMPLATE, sched, repetitions=1)
        assert out["only"].result.series.equals(plain.series)

    def test_non_capacity_override_rejected(self, setup):
        with pytest.raises(ConfigError):
            ComplexityGrid({"t": {"learning_rate": 0.5}}).validate("gbdt")

    def test_mlp_tiers_report_param_count(self, setup):
        mlp = ExperimentSetup(setup.splits, [{"kind": "onehot_encode"}, {"kind": "integer_encode"}, {"kind": "zscore"}],
                              ModelSpec("mlp", {"hidden_layers": [4], "max_epochs": 2, "patience": 1}))
        out = complexity_sweep(ComplexityGrid({"a": {"hidden_layers": [3]}}), mlp, TEMPLATE,
                               InjectionSchedule("unmodified", (0,)), repetitions=1)
        # inputs: x, grp=common, grp=rare, flag
        assert out["a"].param_count == 4 * 3 + 3 + 3 + 1
        assert out["a"].result.aggregation == "best_by_validation"
