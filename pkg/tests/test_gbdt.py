import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tabdoor.errors import ConfigError, ShapeError, ValidationError
from tabdoor.gbdt import GbdtModel, GbdtParams, fit
from tabdoor.gbdt.binning import BinnedData, build_histograms, quantile_boundaries
from tabdoor.gbdt.tree import find_best_split, grow_tree

from reference import brute_force_split


def _params(**kw):
    base = dict(min_data_in_leaf=1, min_gain_to_split=0.0, max_bin=255, num_leaves=31)
    base.update(kw)
    return GbdtParams(**base)


def _chosen(split, data):
    fb = data.features[split.feature]
    rule = frozenset(int(c) for c in fb.categories[split.left_bins]) if fb.categorical else fb.threshold(split.threshold_bin)
    return split.feature, rule, split.missing_left, split.gain


def _gain_of(X, grad, hess, feature, rule, missing_left):
    x = X[:, feature]
    miss = np.isnan(x)
    left = (np.isin(x, list(rule)) if isinstance(rule, frozenset) else x <= rule) & ~miss
    go = left | (miss & missing_left)
    G, H = grad.sum(), hess.sum()
    gl, hl = grad[go].sum(), hess[go].sum()
    return gl * gl / hl + (G - gl) ** 2 / (H - hl) - G * G / H


def random_node(rng, n=None, n_feat=None, missing=0.0, integer=False):
    n = n or int(rng.integers(4, 201))
    n_feat = n_feat or int(rng.integers(1, 4))
    X = rng.integers(0, 6, size=(n, n_feat)).astype(float) if integer else rng.normal(size=(n, n_feat))
    if missing:
        X[rng.uniform(size=X.shape) < missing] = np.nan
    grad = rng.normal(size=n)
    hess = rng.uniform(0.5, 1.5, size=n)
    return X, grad, hess


class TestHistograms:
    def test_fewer_values_than_bins(self):
        bins, stats = build_histograms([1, 2, 3, 4, 1, 2], 10)
        assert bins.n_bins == 4
        assert stats[:, 2].tolist() == [2, 2, 1, 1, 0]

    def test_quantile_boundaries(self):
        assert quantile_boundaries(np.arange(1, 1001), 4).tolist() == [250.5, 500.5, 750.5]

    def test_all_missing_column(self):
        bins, stats = build_histograms([np.nan] * 5, 8)
        assert bins.n_bins == 0 and stats.tolist() == [[5.0, 5.0, 5.0]]

    def test_max_bin_validated(self):
        with pytest.raises(ValueError):
            quantile_boundaries([1, 2], 1)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.one_of(st.floats(-1e3, 1e3), st.just(float("nan"))), min_size=1, max_size=80),
           st.integers(2, 20))
    def test_every_value_in_exactly_one_bin(self, vals, max_bin):
        bins, stats = build_histograms(vals, max_bin)
        assert bins.n_bins <= max_bin
        assert stats[:, 2].sum() == len(vals)
        assert stats[-1, 2] == sum(np.isnan(vals))


class TestSplitOracle:
    def test_simple_threshold(self, backend):
        X = np.array([[1.0], [2.0], [3.0], [4.0]])
        y = np.array([0.0, 0.0, 10.0, 10.0])
        data = BinnedData(X, 255)
        s = find_best_split(data, np.arange(4), -y, np.ones(4), _params())
        assert _chosen(s, data)[:2] == (0, 2.5)

    def test_constant_target_has_no_split(self, backend):
        data = BinnedData(np.arange(10.0)[:, None], 255)
        assert find_best_split(data, np.arange(10), np.zeros(10), np.ones(10), _params(min_gain_to_split=0.1)) is None

    def test_min_data_blocks_split(self, backend):
        data = BinnedData(np.arange(4.0)[:, None], 255)
        y = np.array([0.0, 0.0, 10.0, 10.0])
        assert find_best_split(data, np.arange(4), -y, np.ones(4), _params(min_data_in_leaf=3)) is None

    @pytest.mark.parametrize("missing", [0.0, 0.15])
    def test_matches_brute_force_continuous(self, backend, missing):
        rng = np.random.default_rng(17)
        for _ in range(40):
            X, grad, hess = random_node(rng, missing=missing)
            min_data = int(rng.integers(1, 6))
            data = BinnedData(X, 255)
            got = find_best_split(data, np.arange(len(X)), grad, hess, _params(min_data_in_leaf=min_data))
            want = brute_force_split(X, grad, hess, min_data)
            if want is None:
                assert got is None
                continue
            f, rule, mleft, gain = _chosen(got, data)
            assert (f, rule, mleft) == want[:3]
            assert gain == pytest.approx(want[3], rel=1e-9, abs=1e-9)

    def test_matches_brute_force_with_ties(self, backend):
        # integer-valued features create exact gain ties; any tied optimum is acceptable
        rng = np.random.default_rng(5)
        for _ in range(40):
            X, grad, hess = random_node(rng, n=int(rng.integers(4, 60)), integer=True, missing=0.1)
            grad = np.round(grad, 1)
            hess = np.ones(len(X))
            data = BinnedData(X, 255)
            got = find_best_split(data, np.arange(len(X)), grad, hess, _params(min_data_in_leaf=2))
            want = brute_force_split(X, grad, hess, 2)
            if want is None:
                assert got is None
                continue
            f, rule, mleft, gain = _chosen(got, data)
            assert gain == pytest.approx(want[3], rel=1e-9, abs=1e-9)
            assert _gain_of(X, grad, hess, f, rule, mleft) == pytest.approx(gain, rel=1e-9, abs=1e-9)

    def test_categorical_matches_exhaustive_subsets(self, backend):
        rng = np.random.default_rng(11)
        for _ in range(30):
            n = int(rng.integers(8, 120))
            X = rng.integers(0, 6, size=(n, 1)).astype(float)
            X[rng.uniform(size=n) < 0.1] = np.nan
            grad, hess = rng.normal(size=n), rng.uniform(0.5, 1.5, size=n)
            data = BinnedData(X, 255, categorical=[0])
            got = find_best_split(data, np.arange(n), grad, hess, _params(min_data_in_leaf=2))
            want = brute_force_split(X, grad, hess, 2, categorical=(0,))
            if want is None:
                assert got is None
                continue
            f, rule, mleft, gain = _chosen(got, data)
            assert gain == pytest.approx(want[3], rel=1e-9, abs=1e-9)
            assert _gain_of(X, grad, hess, f, rule, mleft) == pytest.approx(gain, rel=1e-9, abs=1e-9)


def _audit(tree, params):
    leaves = tree.left < 0
    assert tree.n_leaves <= params.num_leaves
    assert (tree.count[leaves] >= params.min_data_in_leaf).all()
    internal = np.flatnonzero(~leaves)
    assert (tree.count[internal] == tree.count[tree.left[internal]] + tree.count[tree.right[internal]]).all()


class TestGrowth:
    def test_stump(self, backend):
        X = np.random.default_rng(0).normal(size=(100, 2))
        m = fit(X, X[:, 0] * 3, _params(num_leaves=2, num_iterations=1), "regression")
        assert m.trees[0].n_leaves == 2

    def test_data_bounds_leaf_count(self, backend):
        X = np.arange(8.0)[:, None]
        m = fit(X, X[:, 0] ** 2, _params(num_leaves=31, num_iterations=1), "regression")
        assert m.trees[0].n_leaves <= 8

    def test_leaf_wise_spends_leaves_on_the_high_gain_branch(self, backend):
        # rows with x0 <= 0 carry a small x1 effect; rows with x0 > 0 carry a large one
        rng = np.random.default_rng(1)
        X = np.column_stack([np.repeat([-1.0, 1.0], 200), rng.uniform(-1, 1, 400)])
        y = np.where(X[:, 0] > 0, 100 * (X[:, 1] > 0), 1 * (X[:, 1] > 0)) + X[:, 0] * 10
        tree = fit(X, y, _params(num_leaves=3, num_iterations=1, learning_rate=1.0), "regression").trees[0]
        root = 0
        assert tree.feature[root] == 0
        right = tree.right[root]
        # a level-wise grower would expand the left child first; leaf-wise expands the right
        assert tree.left[right] >= 0 and tree.left[tree.left[root]] < 0

    def test_max_depth_respected(self, backend):
        X = np.random.default_rng(2).normal(size=(300, 3))
        m = fit(X, X @ [1.0, 2.0, 3.0], _params(num_leaves=50, max_depth=2, num_iterations=2), "regression")
        assert all(t.depth.max() <= 2 for t in m.trees)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 40), st.integers(1, 15))
    def test_structural_audit(self, seed, num_leaves, min_data):
        rng = np.random.default_rng(seed)
        X, _, _ = random_node(rng, n=200, n_feat=3, missing=0.05)
        y = np.nan_to_num(X[:, 0]) + rng.normal(size=200)
        p = _params(num_leaves=num_leaves, min_data_in_leaf=min_data, num_iterations=3)
        for tree in fit(X, y, p, "regression").trees:
            _audit(tree, p)


class TestFit:
    def test_two_leaf_fit_gives_leaf_means(self, backend):
        X = np.array([[1.0], [2.0], [3.0], [4.0]])
        y = np.array([0.0, 0.0, 10.0, 10.0])
        m = fit(X, y, _params(num_leaves=2, num_iterations=1, learning_rate=1.0), "regression")
        assert m.predict(X) == pytest.approx(y)

    def test_monotone_training_loss(self, backend):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(500, 4))
        y = np.sin(X[:, 0]) * 5 + X[:, 1] ** 2 + rng.normal(size=500)
        m = fit(X, y, _params(num_leaves=15, min_data_in_leaf=5, num_iterations=40), "regression")
        loss = np.array(m.history["train_loss"])
        assert (np.diff(loss) <= 1e-9 * loss[:-1]).all()

    def test_deterministic_with_subsampling(self, backend):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(300, 5))
        y = X[:, 0] + rng.normal(size=300)
        p = _params(num_leaves=8, feature_fraction=0.6, bagging_fraction=0.7, bagging_freq=2, num_iterations=10, seed=9)
        assert fit(X, y, p).to_dict() == fit(X, y, p).to_dict()

    def test_backends_agree(self):
        from tabdoor import _jit
        if not _jit.HAVE_NUMBA:
            pytest.skip("numba unavailable")
        rng = np.random.default_rng(6)
        X = rng.normal(size=(400, 4))
        X[:, 3] = rng.integers(0, 10, 400)
        X[rng.uniform(size=X.shape) < 0.05] = np.nan
        y = np.nan_to_num(X[:, 0]) + (X[:, 3] == 2) * 3
        p = _params(num_leaves=12, min_data_in_leaf=5, num_iterations=8)
        out = {}
        for b in ("numpy", "numba"):
            prev = _jit.set_backend(b)
            try:
                out[b] = fit(X, y, p, categorical=[3]).to_dict()
            finally:
                _jit.set_backend(prev)
        assert out["numpy"] == out["numba"]

    def test_classification_base_score_and_range(self, backend):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(200, 2))
        y = (X[:, 0] > 0.8).astype(float)
        m = fit(X, y, _params(num_iterations=5, min_data_in_leaf=5), "classification")
        assert m.base_score == pytest.approx(np.log(y.mean() / (1 - y.mean())))
        p = m.predict(X)
        assert ((p > 0) & (p < 1)).all()

    def test_scale_pos_weight_raises_recall(self, backend):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(2000, 3))
        y = (rng.uniform(size=2000) < 1 / (1 + np.exp(-(X[:, 0] * 1.5 - 3.5)))).astype(float)
        common = dict(num_leaves=8, min_data_in_leaf=20, num_iterations=30, learning_rate=0.1)
        recall = {}
        for w in (1.0, 60.5248):
            pred = fit(X, y, _params(scale_pos_weight=w, **common), "classification").predict(X) >= 0.5
            recall[w] = (pred & (y == 1)).sum() / (y == 1).sum()
        assert recall[60.5248] >= recall[1.0]

    def test_invalid_targets(self):
        with pytest.raises(ValidationError):
            fit(np.zeros((3, 1)), np.array([0.0, 2.0, 1.0]), _params(), "classification")

    def test_n_estimators_is_ignored_with_warning(self):
        X = np.arange(20.0)[:, None]
        with pytest.warns(UserWarning):
            m = fit(X, X[:, 0], _params(num_iterations=3, n_estimators=200), "regression")
        assert len(m.trees) == 3

    def test_params_validated(self):
        with pytest.raises(ConfigError):
            GbdtParams(num_leaves=1)
        with pytest.raises(ConfigError):
            GbdtParams.from_dict({"bogus": 1})


class TestPredict:
    def test_zero_trees_give_base_score(self):
        m = fit(np.arange(10.0)[:, None], np.arange(10.0), _params(num_iterations=0))
        assert (m.predict(np.zeros((3, 1))) == 4.5).all()

    def test_sigmoid_of_zero(self):
        m = GbdtModel(_params(), [], 0.0, "classification", 1)
        assert m.predict(np.zeros((1, 1)))[0] == 0.5

    def test_width_mismatch(self):
        m = GbdtModel(_params(), [], 0.0, "regression", 2)
        with pytest.raises(ShapeError):
            m.predict(np.zeros((1, 3)))

    def test_stump_mechanics(self, backend):
        X = np.array([[1.0], [2.0], [3.0], [4.0]])
        y = np.array([0.0, 0.0, 10.0, 10.0])
        m = fit(X, y, _params(num_leaves=2, num_iterations=1, learning_rate=0.3))
        t = m.trees[0]
        assert m.predict(np.array([[1.5]]))[0] == pytest.approx(5 + 0.3 * t.value[t.left[0]])

    def test_missing_follows_recorded_direction(self, backend):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(200, 1))
        X[:30] = np.nan
        y = np.where(np.isnan(X[:, 0]), 10.0, (X[:, 0] > 0) * 1.0)
        m = fit(X, y, _params(num_leaves=2, num_iterations=1, learning_rate=1.0))
        t = m.trees[0]
        row = np.array([[np.nan]])
        side = t.left[0] if t.default_left[0] else t.right[0]
        assert t.apply(row)[0] == side
        t.default_left[0] = not t.default_left[0]
        assert t.apply(row)[0] != side

    def test_json_round_trip(self, backend, tmp_path):
        rng = np.random.default_rng(10)
        X = rng.normal(size=(150, 3))
        X[:, 2] = rng.integers(0, 5, 150)
        X[rng.uniform(size=X.shape) < 0.05] = np.nan
        y = np.nan_to_num(X[:, 0]) + (X[:, 2] == 1)
        m = fit(X, y, _params(num_iterations=5, min_data_in_leaf=3), categorical=[2])
        m.save(tmp_path / "m.json")
        assert np.array_equal(GbdtModel.load(tmp_path / "m.json").predict(X), m.predict(X))
