import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import poisson

from tabdoor.dataset import (Dataset, FeatureSpec, Schema, ValidityRule, clean_invalid, drop_duplicates,
                             load_csv, split_dataset, split_sizes, write_csv)
from tabdoor.errors import ConfigError, ParseError, SchemaError, ValidationError
from tabdoor.synth import synthesize_dataset

from conftest import toy_dataset, toy_schema


def _numeric(n, seed=0):
    schema = Schema((FeatureSpec("x", "numeric"), FeatureSpec("y", "numeric", role="target")), "regression")
    rng = np.random.default_rng(seed)
    return Dataset(schema, {"x": rng.normal(size=n), "y": rng.normal(size=n)})


def _labelled(n, n_pos, seed=0):
    schema = Schema((FeatureSpec("x", "numeric"),
                     FeatureSpec("fraud", "binary", allowed_values=("0", "1"), role="target")),
                    "binary_classification")
    y = np.array(["1"] * n_pos + ["0"] * (n - n_pos), dtype=object)
    y = y[np.random.default_rng(seed).permutation(n)]
    return Dataset(schema, {"x": np.arange(n, dtype=float), "fraud": y})


class TestSchema:
    def test_needs_exactly_one_target(self):
        with pytest.raises(ConfigError):
            Schema((FeatureSpec("a", "numeric"),), "regression")

    def test_regression_target_must_be_numeric(self):
        with pytest.raises(ConfigError):
            Schema((FeatureSpec("t", "binary", allowed_values=("0", "1"), role="target"),), "regression")

    def test_bounds_order_checked(self):
        with pytest.raises(ConfigError):
            FeatureSpec("a", "numeric", numeric_bounds=(5, 1))

    def test_unknown_category_rejected(self):
        with pytest.raises(ValidationError):
            Dataset.from_records(toy_schema(), [{"age": 30, "city": "zzz", "smoker": "no", "y": 1.0}])


class TestCsv:
    def test_round_trip_keeps_cells_and_mask(self, tmp_path):
        d = toy_dataset(40)
        d = Dataset(d.schema, d.columns, {"age": np.arange(40) % 7 == 0, "city": np.arange(40) % 5 == 0})
        write_csv(d, tmp_path / "d.csv")
        back = load_csv(tmp_path / "d.csv", d.schema)
        assert back.equals(d)
        assert np.array_equal(back.missing_mask, d.missing_mask)

    def test_header_only_gives_empty_dataset(self, tmp_path):
        p = tmp_path / "h.csv"
        p.write_text("age,city,smoker,y\n")
        assert load_csv(p, toy_schema()).n_rows == 0

    def test_header_order_does_not_matter(self, tmp_path):
        p = tmp_path / "h.csv"
        p.write_text("y,smoker,city,age\n100,no,a,30\n")
        assert load_csv(p, toy_schema()).records() == [{"age": 30.0, "city": "a", "smoker": "no", "y": 100.0}]

    def test_missing_column_is_schema_error(self, tmp_path):
        p = tmp_path / "h.csv"
        p.write_text("age,city,y\n30,a,1\n")
        with pytest.raises(SchemaError):
            load_csv(p, toy_schema())

    def test_bad_number_names_row_and_column(self, tmp_path):
        p = tmp_path / "h.csv"
        p.write_text("age,city,smoker,y\n30,a,no,1\nold,a,no,2\n")
        with pytest.raises(ParseError) as exc:
            load_csv(p, toy_schema())
        assert exc.value.row == 1 and exc.value.column == "age"

    def test_sentinel_becomes_missing(self, tmp_path):
        schema = Schema((FeatureSpec("Age", "numeric", missing_values=("0",)),
                         FeatureSpec("y", "numeric", role="target")), "regression")
        p = tmp_path / "s.csv"
        p.write_text("Age,y\n0,1\n35,2\n")
        d = load_csv(p, schema)
        assert d.missing("Age").tolist() == [True, False]


class TestCleaning:
    def test_drop_duplicates_keeps_first_occurrence(self):
        d = _numeric(3)
        d = d.take([0, 1, 0])
        out = drop_duplicates(d)
        assert out.rows() == [d.rows()[0], d.rows()[1]]

    def test_missing_cells_compare_equal(self):
        d = _numeric(2)
        d = Dataset(d.schema, {"x": [np.nan, np.nan], "y": [1.0, 1.0]})
        assert drop_duplicates(d).n_rows == 1

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=0, max_size=30))
    def test_drop_duplicates_is_idempotent(self, idx):
        d = _numeric(5).take(idx)
        once = drop_duplicates(d)
        assert drop_duplicates(once).equals(once)
        assert once.n_rows == len(set(idx))

    def test_clean_invalid_predicate(self):
        schema = Schema((FeatureSpec("age", "numeric"), FeatureSpec("y", "numeric", role="target")), "regression")
        d = Dataset(schema, {"age": [17.0, 20.0], "y": [0.0, 1.0]})
        out, removed = clean_invalid(d, [ValidityRule("age", ">=", 18)])
        assert (out.n_rows, removed) == (1, 1)

    def test_clean_invalid_empty_rules_is_identity(self):
        d = toy_dataset(10)
        out, removed = clean_invalid(d, [])
        assert out is d and removed == 0

    def test_clean_invalid_unknown_feature(self):
        with pytest.raises(ConfigError):
            clean_invalid(toy_dataset(5), [ValidityRule("nope", "==", 1)])

    def test_label_rule_removes_single_invalid_row(self):
        d = toy_dataset(20)
        recs = d.records()
        recs[3]["city"] = None
        d = Dataset.from_records(d.schema, recs)
        out, removed = clean_invalid(d, [ValidityRule("city", "not_missing")])
        assert removed == 1 and out.n_rows == 19


class TestSplit:
    @pytest.mark.parametrize("n,expected", [(13904, (11123, 1390, 1391)), (15419, (12335, 1542, 1542)),
                                            (10, (8, 1, 1))])
    def test_part_sizes(self, n, expected):
        assert split_sizes(n, (0.8, 0.1, 0.1)) == expected

    def test_non_stratified_counts_on_data(self):
        assert split_dataset(_numeric(13904), seed=3).sizes() == (11123, 1390, 1391)

    def test_stratified_counts_and_proportions(self):
        d = _labelled(15419, 923)
        s = split_dataset(d, stratified=True, seed=1)
        assert s.sizes() == (12335, 1542, 1542)
        for part in (s.train, s.validation, s.test):
            expected = part.n_rows * 923 / 15419
            assert abs(part.target_vector().sum() - expected) <= 1
            if part.n_rows >= 1000:
                assert abs(part.target_vector().mean() - 923 / 15419) <= 0.001

    def test_same_seed_same_split(self):
        d = _numeric(100)
        a, b = split_dataset(d, seed=5), split_dataset(d, seed=5)
        assert all(np.array_equal(x, y) for x, y in zip(a.indices, b.indices))

    def test_too_small(self):
        with pytest.raises(ValidationError):
            split_dataset(_numeric(2))

    def test_ratios_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            split_sizes(10, (0.5, 0.2, 0.2))

    def test_stratified_needs_classification(self):
        with pytest.raises(ConfigError):
            split_dataset(_numeric(30), stratified=True)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(3, 400), st.integers(0, 2**31 - 1), st.booleans())
    def test_parts_partition_input(self, n, seed, stratified):
        d = _labelled(n, max(1, n // 7), seed % 97)
        s = split_dataset(d, stratified=stratified, seed=seed)
        allidx = np.concatenate(s.indices)
        assert sorted(allidx.tolist()) == list(range(n))
        assert s.sizes() == split_sizes(n, (0.8, 0.1, 0.1))


GEN = {
    "task": "regression",
    "features": [
        {"name": "x", "kind": "numeric", "dist": {"type": "normal", "mean": 0, "std": 1}},
        {"name": "cat", "kind": "categorical", "values": ["common", "rare"], "freqs": [0.999, 0.001]},
    ],
    "target": {"name": "y", "intercept": 1.0, "terms": [{"feature": "x", "coef": 2.0},
                                                        {"feature": "cat", "effects": {"rare": 50.0}}],
               "noise": 0.1},
}


class TestSynthesize:
    def test_empty(self):
        assert synthesize_dataset(GEN, 0, 0).n_rows == 0

    def test_deterministic(self):
        a, b = synthesize_dataset(GEN, 500, 9), synthesize_dataset(GEN, 500, 9)
        assert a.fingerprint() == b.fingerprint()

    def test_rare_category_within_poisson_interval(self):
        d = synthesize_dataset(GEN, 10_000, 0)
        count = int((d.column("cat") == "rare").sum())
        lo, hi = poisson.ppf(0.005, 10), poisson.ppf(0.995, 10)
        assert lo <= count <= hi

    def test_frequencies_must_sum_to_one(self):
        bad = {**GEN, "features": [GEN["features"][0], {**GEN["features"][1], "freqs": [0.5, 0.4]}]}
        with pytest.raises(ConfigError):
            synthesize_dataset(bad, 10, 0)
