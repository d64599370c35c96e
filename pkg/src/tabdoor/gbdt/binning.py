"""Quantile binning of feature columns.

Numeric columns get at most ``max_bin`` value bins whose boundaries sit
halfway between neighbouring training values; a value ``x`` falls into bin
``#(boundaries < x)``. Categorical columns (integer codes) get one bin per
distinct non-negative code. Missing values (and negative category codes)
always land in the extra bin at index ``n_bins``.
"""
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FeatureBins:
    categorical: bool
    boundaries: np.ndarray  # numeric only, len == n_bins - 1
    categories: np.ndarray  # categorical only, sorted codes, len == n_bins

    @property
    def n_bins(self):
        if self.categorical:
            return len(self.categories)
        if self.boundaries is None:
            return 0
        return len(self.boundaries) + 1

    def threshold(self, t):
        """Raw-value threshold equivalent to ``bin <= t``."""
        if t >= len(self.boundaries):
            return np.inf
        return float(self.boundaries[t])

    def transform(self, column):
        column = np.asarray(column, dtype=np.float64)
        out = np.full(len(column), self.n_bins, dtype=np.int32)
        ok = ~np.isnan(column)
        if self.categorical:
            ok &= column >= 0
            codes = np.trunc(column[ok]).astype(np.int64)
            if len(self.categories):
                idx = np.minimum(np.searchsorted(self.categories, codes), len(self.categories) - 1)
                # codes unknown to the mapper share the missing slot; only training data is binned
                out[ok] = np.where(self.categories[idx] == codes, idx, self.n_bins)
        elif self.n_bins > 0:
            out[ok] = np.searchsorted(self.boundaries, column[ok], side="left")
        return out


def quantile_boundaries(values, max_bin):
    """Bin boundaries for non-missing ``values`` (at most ``max_bin`` bins)."""
    if max_bin < 2:
        raise ValueError("max_bin must be >= 2")
    values = np.sort(np.asarray(values, dtype=np.float64))
    if len(values) == 0:
        return None
    distinct, counts = np.unique(values, return_counts=True)
    if len(distinct) <= max_bin:
        return (distinct[:-1] + distinct[1:]) / 2.0
    n = len(values)
    cum = np.cumsum(counts)
    cuts = set()
    for k in range(1, max_bin):
        rank = k * n / max_bin
        j = int(np.searchsorted(cum, rank - 1e-9, side="left"))
        if j < len(distinct) - 1:
            cuts.add(j)
    return np.array([(distinct[j] + distinct[j + 1]) / 2.0 for j in sorted(cuts)])


def build_feature_bins(column, max_bin, categorical=False) -> FeatureBins:
    column = np.asarray(column, dtype=np.float64)
    ok = ~np.isnan(column)
    if categorical:
        codes = np.unique(np.trunc(column[ok & (column >= 0)]).astype(np.int64))
        return FeatureBins(True, None, codes)
    return FeatureBins(False, quantile_boundaries(column[ok], max_bin), None)


def build_histograms(column, max_bin, grad=None, hess=None, categorical=False):
    """Bin one column and sum (gradient, hessian, count) per bin.

    Returns ``(bins, stats)`` with ``stats`` of shape ``(n_bins + 1, 3)``; the
    last row is the missing bin. Without gradients, unit gradient and hessian
    are used so ``stats[:, 2]`` is simply the per-bin count.
    """
    column = np.asarray(column, dtype=np.float64)
    bins = build_feature_bins(column, max_bin, categorical)
    idx = bins.transform(column)
    g = np.ones(len(column)) if grad is None else np.asarray(grad, dtype=np.float64)
    h = np.ones(len(column)) if hess is None else np.asarray(hess, dtype=np.float64)
    size = bins.n_bins + 1
    stats = np.column_stack([
        np.bincount(idx, weights=g, minlength=size),
        np.bincount(idx, weights=h, minlength=size),
        np.bincount(idx, minlength=size).astype(float),
    ])
    return bins, stats


class BinnedData:
    """A training matrix binned column by column."""

    def __init__(self, X, max_bin, categorical=()):
        X = np.asarray(X, dtype=np.float64)
        self.n_rows, self.n_features = X.shape
        cat = set(int(c) for c in categorical)
        self.features = [build_feature_bins(X[:, j], max_bin, j in cat) for j in range(self.n_features)]
        self.n_bins = np.array([f.n_bins for f in self.features], dtype=np.int64)
        self.is_categorical = np.array([f.categorical for f in self.features], dtype=bool)
        self.n_slots = int(self.n_bins.max()) + 1 if self.n_features else 1
        binned = np.empty((self.n_rows, self.n_features), dtype=np.int32)
        for j, f in enumerate(self.features):
            binned[:, j] = f.transform(X[:, j])
        self.binned = np.ascontiguousarray(binned)
        self.by_column = np.ascontiguousarray(binned.T)  # fast row partitioning
