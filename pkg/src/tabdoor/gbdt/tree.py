"""Split finding and leaf-wise tree growth on binned data."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from .binning import BinnedData

# Gains this close to zero (relative to the parent score) are rounding noise.
GAIN_EPS = 1e-10


@dataclass
class Split:
    feature: int
    gain: float
    missing_left: bool
    left_bins: np.ndarray  # bin indices (excluding the missing bin) routed left
    threshold_bin: int = -1  # numeric splits: left is ``bin <= threshold_bin``
    left_stats: tuple = (0.0, 0.0, 0.0)


def best_split_from_hist(hist, features, data: BinnedData, G, H, C, params):
    """Best admissible split of a node given its histograms, or ``None``.

    ``hist[j]`` belongs to ``features[j]``. Features are compared in the given
    order and a later feature must be strictly better to win.
    """
    p = params
    features = np.asarray(features, dtype=np.int64)
    nb = data.n_bins[features]
    is_cat = data.is_categorical[features]
    gains, bins, mleft = kernels.scan_numeric(
        hist, np.where(is_cat, 0, nb), G, H, C, p.min_data_in_leaf, p.min_sum_hessian_in_leaf, p.lambda_l2
    )
    masks = {}
    for j in np.flatnonzero(is_cat):
        gains[j], masks[j], mleft[j] = kernels.scan_categorical(
            hist[j], nb[j], G, H, C, p.min_data_in_leaf, p.min_sum_hessian_in_leaf, p.lambda_l2, p.max_cat_scan
        )
    best_j = -1
    for j in range(len(features)):
        if gains[j] > -np.inf and (best_j < 0 or gains[j] > gains[best_j]):
            best_j = j
    if best_j < 0:
        return None
    gain = float(gains[best_j])
    parent = G * G / (H + p.lambda_l2)
    if gain <= GAIN_EPS * max(1.0, abs(parent)) or gain < p.min_gain_to_split:
        return None
    j = best_j
    if is_cat[j]:
        left_bins = np.flatnonzero(masks[j])
        t = -1
    else:
        t = int(bins[j])
        left_bins = np.arange(t + 1)
    left_stats = hist[j, left_bins].sum(axis=0)
    if mleft[j]:
        left_stats = left_stats + hist[j, nb[j]]
    return Split(int(features[j]), gain, bool(mleft[j]), left_bins, t, tuple(float(v) for v in left_stats))


def find_best_split(data: BinnedData, rows, grad, hess, params, features=None):
    """Best split of the node holding ``rows`` (see :func:`best_split_from_hist`)."""
    rows = np.asarray(rows, dtype=np.int64)
    if features is None:
        features = np.arange(data.n_features)
    features = np.asarray(features, dtype=np.int64)
    if len(rows) < 2 * params.min_data_in_leaf or len(features) == 0:
        return None
    hist = kernels.build_hist(data.binned, rows, grad, hess, features, data.n_slots)
    return best_split_from_hist(hist, features, data, float(grad[rows].sum()), float(hess[rows].sum()), float(len(rows)), params)


def left_table(split: Split, data: BinnedData):
    """Boolean lookup over bin slots: True where rows go left."""
    table = np.zeros(data.n_slots, dtype=bool)
    table[split.left_bins] = True
    table[data.n_bins[split.feature]] = split.missing_left
    return table


def partition(data: BinnedData, rows, split: Split):
    go = left_table(split, data)[data.by_column[split.feature][rows]]
    return rows[go], rows[~go]


@dataclass
class Tree:
    """Flat array representation; ``left[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    default_left: np.ndarray
    is_cat: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    count: np.ndarray
    depth: np.ndarray
    cat_start: np.ndarray
    cat_len: np.ndarray
    cat_codes: np.ndarray

    @property
    def n_nodes(self):
        return len(self.left)

    @property
    def n_leaves(self):
        return int((self.left < 0).sum())

    @property
    def leaves(self):
        return np.flatnonzero(self.left < 0)

    def arrays(self):
        return {k: getattr(self, k) for k in (
            "feature", "threshold", "default_left", "is_cat", "left", "right", "value",
            "cat_start", "cat_len", "cat_codes")}

    def apply(self, X):
        return kernels.tree_leaves(X, self.arrays())

    def predict(self, X):
        return self.value[self.apply(X)]

    def categories_of(self, node):
        s, n = int(self.cat_start[node]), int(self.cat_len[node])
        return self.cat_codes[s:s + n]

    def to_dict(self):
        nodes = []
        for i in range(self.n_nodes):
            if self.left[i] < 0:
                nodes.append({"leaf_value": float(self.value[i]), "count": int(self.count[i])})
                continue
            node = {
                "split_feature": int(self.feature[i]),
                "default_left": bool(self.default_left[i]),
                "left": int(self.left[i]),
                "right": int(self.right[i]),
                "gain": float(self.gain[i]),
                "count": int(self.count[i]),
            }
            if self.is_cat[i]:
                node["categories"] = [int(c) for c in self.categories_of(i)]
            else:
                thr = float(self.threshold[i])
                node["threshold"] = thr if np.isfinite(thr) else "inf"
            nodes.append(node)
        return {"nodes": nodes}

    @classmethod
    def from_dict(cls, d):
        b = _TreeBuilder()
        for node in d["nodes"]:
            if "leaf_value" in node:
                b.add(value=node["leaf_value"], count=node.get("count", 0))
            else:
                thr = node.get("threshold", np.nan)
                b.add(
                    feature=node["split_feature"],
                    threshold=np.inf if thr == "inf" else float(thr),
                    default_left=node["default_left"],
                    is_cat="categories" in node,
                    left=node["left"],
                    right=node["right"],
                    gain=node.get("gain", 0.0),
                    count=node.get("count", 0),
                    categories=node.get("categories", ()),
                )
        return b.build()


class _TreeBuilder:
    def __init__(self):
        self.rows = []
        self.cats = []

    def add(self, feature=-1, threshold=np.nan, default_left=False, is_cat=False, left=-1, right=-1,
            value=0.0, gain=0.0, count=0, depth=0, categories=()):
        start = len(self.cats)
        self.cats.extend(int(c) for c in categories)
        self.rows.append([feature, threshold, default_left, is_cat, left, right, value, gain, count, depth,
                          start, len(categories)])
        return len(self.rows) - 1

    def set(self, i, **kw):
        keys = ["feature", "threshold", "default_left", "is_cat", "left", "right", "value", "gain", "count", "depth"]
        for k, v in kw.items():
            if k == "categories":
                self.rows[i][10] = len(self.cats)
                self.rows[i][11] = len(v)
                self.cats.extend(int(c) for c in v)
            else:
                self.rows[i][keys.index(k)] = v

    def build(self) -> Tree:
        cols = list(zip(*self.rows)) if self.rows else [()] * 12
        return Tree(
            feature=np.array(cols[0], dtype=np.int64),
            threshold=np.array(cols[1], dtype=np.float64),
            default_left=np.array(cols[2], dtype=np.bool_),
            is_cat=np.array(cols[3], dtype=np.bool_),
            left=np.array(cols[4], dtype=np.int64),
            right=np.array(cols[5], dtype=np.int64),
            value=np.array(cols[6], dtype=np.float64),
            gain=np.array(cols[7], dtype=np.float64),
            count=np.array(cols[8], dtype=np.int64),
            depth=np.array(cols[9], dtype=np.int64),
            cat_start=np.array(cols[10], dtype=np.int64),
            cat_len=np.array(cols[11], dtype=np.int64),
            cat_codes=np.array(self.cats, dtype=np.int64),
        )


@dataclass(order=True)
class _Candidate:
    priority: float
    node: int
    split: Split = field(compare=False)
    rows: np.ndarray = field(compare=False)
    hist: np.ndarray = field(compare=False)
    depth: int = field(compare=False)


def grow_tree(data: BinnedData, grad, hess, rows, params, features=None) -> Tree:
    """Grow one tree leaf-wise: always split the open leaf with the largest gain.

    Growth stops at ``num_leaves`` leaves or when no leaf has an admissible
    split. Leaves at depth ``max_depth`` (if positive) are not split. Leaf
    values are ``-G / (H + lambda_l2)``.
    """
    p = params
    rows = np.asarray(rows, dtype=np.int64)
    features = np.arange(data.n_features, dtype=np.int64) if features is None else np.asarray(features, dtype=np.int64)
    builder = _TreeBuilder()
    sums = {}

    def open_leaf(node_rows, hist, G, H, C, depth):
        node = builder.add(count=int(C), depth=depth)
        sums[node] = (G, H)
        split = None
        can_deepen = p.max_depth <= 0 or depth < p.max_depth
        if can_deepen and C >= 2 * p.min_data_in_leaf and len(features):
            split = best_split_from_hist(hist, features, data, G, H, C, p)
        if split is not None:
            heapq.heappush(heap, _Candidate(-split.gain, node, split, node_rows, hist, depth))
        return node

    heap = []
    root_hist = kernels.build_hist(data.binned, rows, grad, hess, features, data.n_slots)
    open_leaf(rows, root_hist, float(grad[rows].sum()), float(hess[rows].sum()), float(len(rows)), 0)
    n_leaves = 1
    while heap and n_leaves < p.num_leaves:
        cand = heapq.heappop(heap)
        s = cand.split
        left_rows, right_rows = partition(data, cand.rows, s)
        G, H = sums[cand.node]
        gl, hl, _ = s.left_stats
        if len(left_rows) <= len(right_rows):
            small, large = left_rows, right_rows
        else:
            small, large = right_rows, left_rows
        small_hist = kernels.build_hist(data.binned, small, grad, hess, features, data.n_slots)
        large_hist = cand.hist - small_hist
        lh, rh = (small_hist, large_hist) if small is left_rows else (large_hist, small_hist)
        left_id = open_leaf(left_rows, lh, gl, hl, float(len(left_rows)), cand.depth + 1)
        right_id = open_leaf(right_rows, rh, G - gl, H - hl, float(len(right_rows)), cand.depth + 1)
        fb = data.features[s.feature]
        if fb.categorical:
            builder.set(cand.node, feature=s.feature, is_cat=True, default_left=s.missing_left,
                        categories=fb.categories[s.left_bins], left=left_id, right=right_id, gain=s.gain)
        else:
            builder.set(cand.node, feature=s.feature, threshold=fb.threshold(s.threshold_bin),
                        default_left=s.missing_left, left=left_id, right=right_id, gain=s.gain)
        n_leaves += 1

    tree = builder.build()
    for node, (G, H) in sums.items():
        if tree.left[node] < 0:
            tree.value[node] = -G / (H + p.lambda_l2) if H + p.lambda_l2 > 0 else 0.0
    return tree
