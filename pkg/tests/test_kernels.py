import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabdoor import _jit, kernels
from tabdoor.gbdt import GbdtParams, fit
from tabdoor.gbdt.binning import BinnedData

needs_numba = pytest.mark.skipif(not _jit.HAVE_NUMBA, reason="numba not installed")


def knn_oracle(X, k):
    m, d = X.shape
    out = []
    for i in range(m):
        dists = []
        for j in range(m):
            if i == j:
                continue
            both = ~np.isnan(X[i]) & ~np.isnan(X[j])
            n = both.sum()
            dist = np.inf if n == 0 else np.sqrt(((X[i, both] - X[j, both]) ** 2).sum() * d / n)
            dists.append((dist, j))
        dists.sort()
        out.append([j for _, j in dists[:k]])
    return np.array(out)


def with_backend(name, fn, *args):
    previous = _jit.set_backend(name)
    try:
        return fn(*args)
    finally:
        _jit.set_backend(previous)


def test_knn_ties_keep_lower_index(backend):
    # 1, 2 and 3 sit at the same distance from row 0
    X = np.array([[0.0], [1.0], [-1.0], [1.0], [5.0]])
    np.testing.assert_array_equal(kernels.knn_indices(X, 2)[0], [1, 2])
    np.testing.assert_array_equal(kernels.knn_indices(X, 2), knn_oracle(X, 2))


def test_knn_skips_missing_coordinates(backend):
    X = np.array([[0.0, np.nan], [3.0, 0.0], [1.0, 100.0], [np.nan, np.nan]])
    np.testing.assert_array_equal(kernels.knn_indices(X, 2), knn_oracle(X, 2))


def test_knn_needs_enough_rows(backend):
    with pytest.raises(ValueError):
        kernels.knn_indices(np.zeros((3, 2)), 3)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(4, 25), d=st.integers(1, 4), k=st.integers(1, 3),
       missing=st.sampled_from([0.0, 0.2]), grid=st.booleans())
def test_knn_matches_brute_force_on_both_backends(seed, m, d, k, missing, grid):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 3, (m, d)).astype(float) if grid else rng.normal(size=(m, d))
    X[rng.uniform(size=X.shape) < missing] = np.nan
    expected = knn_oracle(X, k)
    for name in ["numpy"] + (["numba"] if _jit.HAVE_NUMBA else []):
        np.testing.assert_array_equal(with_backend(name, kernels.knn_indices, X, k), expected)


def hist_oracle(binned, rows, grad, hess, features, n_slots):
    out = np.zeros((len(features), n_slots, 3))
    for a, f in enumerate(features):
        for r in rows:
            out[a, binned[r, f]] += (grad[r], hess[r], 1.0)
    return out


def test_histograms_match_loop_oracle(backend):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(300, 4))
    X[rng.uniform(size=X.shape) < 0.1] = np.nan
    data = BinnedData(X, 16)
    rows = np.sort(rng.choice(300, 180, replace=False)).astype(np.int64)
    grad, hess = rng.normal(size=300), rng.uniform(0.5, 1.5, 300)
    feats = np.array([0, 2, 3], dtype=np.int64)
    got = kernels.build_hist(data.binned, rows, grad, hess, feats, data.n_slots)
    np.testing.assert_allclose(got, hist_oracle(data.binned, rows, grad, hess, feats, data.n_slots), rtol=1e-12)


@needs_numba
def test_forest_prediction_agrees_across_backends():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(400, 3))
    X[:, 2] = rng.integers(0, 6, 400)
    y = X[:, 0] + np.where(np.isin(X[:, 2], [1, 4]), 2.0, 0.0) + rng.normal(0, 0.1, 400)
    X[rng.uniform(size=X.shape) < 0.05] = np.nan
    y = np.nan_to_num(y)
    model = fit(X, y, GbdtParams(num_leaves=8, min_data_in_leaf=5, num_iterations=15), categorical=[2])
    forest = model.forest()
    a = with_backend("numpy", kernels.predict_forest, X, forest, 0.1)
    b = with_backend("numba", kernels.predict_forest, X, forest, 0.1)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    # and both agree with summing the trees one at a time
    staged = list(model.staged_predict(X))[-1]
    np.testing.assert_allclose(model.predict(X), staged, atol=1e-9)
