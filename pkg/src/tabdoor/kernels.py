"""Hot numeric kernels with numba and pure-numpy implementations.

Each public function dispatches on :data:`tabdoor._jit.use_numba`. The two
paths compute the same quantities; histogram sums may differ in the last ulp
because the numpy path accumulates with ``bincount``.
"""
import numpy as np

from . import _jit
from ._jit import njit


# -- nearest neighbours (SMOTE) ----------------------------------------------------

@njit
def _knn_numba(X, k):
    m, d = X.shape
    out = np.empty((m, k), dtype=np.int64)
    best_d = np.empty(k)
    best_i = np.empty(k, dtype=np.int64)
    for i in range(m):
        best_d[:] = np.inf
        best_i[:] = -1
        for j in range(m):
            if i == j:
                continue
            acc = 0.0
            present = 0
            for c in range(d):
                a = X[i, c]
                b = X[j, c]
                if np.isnan(a) or np.isnan(b):
                    continue
                diff = a - b
                acc += diff * diff
                present += 1
            dj = np.inf if present == 0 else np.sqrt(acc * d / present)
            # insertion into the sorted k-best list; strict < keeps the lower index on ties
            if dj < best_d[k - 1] or best_i[k - 1] < 0:
                t = k - 1
                while t > 0 and (dj < best_d[t - 1] or best_i[t - 1] < 0):
                    best_d[t] = best_d[t - 1]
                    best_i[t] = best_i[t - 1]
                    t -= 1
                best_d[t] = dj
                best_i[t] = j
        out[i] = best_i
    return out


def _knn_numpy(X, k, chunk=512):
    m, d = X.shape
    present = ~np.isnan(X)
    Xz = np.where(present, X, 0.0)
    out = np.empty((m, k), dtype=np.int64)
    for start in range(0, m, chunk):
        stop = min(start + chunk, m)
        A, Pa = Xz[start:stop], present[start:stop]
        # squared distance over coordinates present in both rows
        both = Pa[:, None, :] & present[None, :, :]
        diff = (A[:, None, :] - Xz[None, :, :]) * both
        acc = np.einsum("ijk,ijk->ij", diff, diff)
        cnt = both.sum(axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.where(cnt > 0, np.sqrt(acc * d / np.maximum(cnt, 1)), np.inf)
        rows = np.arange(stop - start)
        dist[rows, np.arange(start, stop)] = np.nan  # self is never a neighbour
        kth = np.partition(np.where(np.isnan(dist), np.inf, dist), k - 1, axis=1)[:, k - 1]
        for r in rows:
            # every row tied with the k-th distance is a candidate; stable sort keeps lower indices first
            cand = np.flatnonzero(dist[r] <= kth[r]) if np.isfinite(kth[r]) else np.flatnonzero(~np.isnan(dist[r]))
            out[start + r] = cand[np.argsort(dist[r, cand], kind="stable")[:k]]
    return out


def knn_indices(X, k):
    """Indices of the ``k`` nearest other rows of ``X`` (NaN-aware Euclidean).

    Ties are broken by lower row index. Coordinates missing in either row are
    skipped and the sum is rescaled by ``d / n_present``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.shape[0] <= k:
        raise ValueError(f"need more than {k} rows for {k} neighbours")
    if _jit.use_numba:
        return _knn_numba(X, k)
    return _knn_numpy(X, k)


# -- histograms ---------------------------------------------------------------------

@njit
def _hist_numba(binned, rows, grad, hess, features, n_slots):
    nf = features.shape[0]
    hist = np.zeros((nf, n_slots, 3))
    for r in range(rows.shape[0]):
        i = rows[r]
        g = grad[i]
        h = hess[i]
        for j in range(nf):
            b = binned[i, features[j]]
            hist[j, b, 0] += g
            hist[j, b, 1] += h
            hist[j, b, 2] += 1.0
    return hist


def _hist_numpy(binned, rows, grad, hess, features, n_slots):
    nf = len(features)
    hist = np.zeros((nf, n_slots, 3))
    sub = binned[rows][:, features]
    g = grad[rows]
    h = hess[rows]
    for j in range(nf):
        b = sub[:, j]
        hist[j, :, 0] = np.bincount(b, weights=g, minlength=n_slots)
        hist[j, :, 1] = np.bincount(b, weights=h, minlength=n_slots)
        hist[j, :, 2] = np.bincount(b, minlength=n_slots)
    return hist


def build_hist(binned, rows, grad, hess, features, n_slots):
    """Per-feature (grad, hess, count) sums for ``rows``; shape ``(len(features), n_slots, 3)``."""
    if _jit.use_numba:
        return _hist_numba(binned, rows, grad, hess, features, n_slots)
    return _hist_numpy(binned, rows, grad, hess, features, n_slots)


# -- numeric split scan ------------------------------------------------------------------

@njit
def _scan_numba(hist, n_bins, G, H, C, min_data, min_hess, lam):
    nf = hist.shape[0]
    best_gain = np.full(nf, -np.inf)
    best_bin = np.full(nf, -1, dtype=np.int64)
    best_left = np.zeros(nf, dtype=np.bool_)
    parent = G * G / (H + lam)
    for j in range(nf):
        nb = n_bins[j]
        gm = hist[j, nb, 0]
        hm = hist[j, nb, 1]
        cm = hist[j, nb, 2]
        gl = 0.0
        hl = 0.0
        cl = 0.0
        for t in range(nb):
            gl += hist[j, t, 0]
            hl += hist[j, t, 1]
            cl += hist[j, t, 2]
            for side in range(2):
                # side 0: missing goes left, side 1: missing goes right
                if side == 0:
                    if cm == 0.0:
                        continue
                    gL = gl + gm
                    hL = hl + hm
                    cL = cl + cm
                else:
                    gL = gl
                    hL = hl
                    cL = cl
                gR = G - gL
                hR = H - hL
                cR = C - cL
                if cL < min_data or cR < min_data or hL < min_hess or hR < min_hess:
                    continue
                gain = gL * gL / (hL + lam) + gR * gR / (hR + lam) - parent
                if gain > best_gain[j]:
                    best_gain[j] = gain
                    best_bin[j] = t
                    best_left[j] = side == 0
    return best_gain, best_bin, best_left


def _scan_numpy(hist, n_bins, G, H, C, min_data, min_hess, lam):
    nf, n_slots, _ = hist.shape
    best_gain = np.full(nf, -np.inf)
    best_bin = np.full(nf, -1, dtype=np.int64)
    best_left = np.zeros(nf, dtype=bool)
    parent = G * G / (H + lam)
    for j in range(nf):
        nb = int(n_bins[j])
        if nb == 0:
            continue
        cum = np.cumsum(hist[j, :nb], axis=0)
        miss = hist[j, nb]
        cands = []
        for side in (0, 1):
            if side == 0 and miss[2] == 0.0:
                continue
            left = cum + miss if side == 0 else cum
            gL, hL, cL = left[:, 0], left[:, 1], left[:, 2]
            gR, hR, cR = G - gL, H - hL, C - cL
            ok = (cL >= min_data) & (cR >= min_data) & (hL >= min_hess) & (hR >= min_hess)
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = gL * gL / (hL + lam) + gR * gR / (hR + lam) - parent
            gain = np.where(ok, gain, -np.inf)
            cands.append((side, gain))
        if not cands:
            continue
        # order candidates as the loop kernel does: by threshold, then missing-left first
        stacked = np.full((nb, 2), -np.inf)
        for side, gain in cands:
            stacked[:, side] = gain
        flat = stacked.reshape(-1)
        k = int(np.argmax(flat))
        if flat[k] > -np.inf:
            best_gain[j] = flat[k]
            best_bin[j] = k // 2
            best_left[j] = (k % 2) == 0
    return best_gain, best_bin, best_left


def scan_numeric(hist, n_bins, G, H, C, min_data, min_hess, lam):
    """Best threshold per feature over histogram prefixes, trying missing on both sides.

    Returns ``(gain, threshold_bin, missing_left)`` arrays; gain is ``-inf``
    where no admissible split exists. Ties go to the lower bin, then to
    missing-left.
    """
    n_bins = np.asarray(n_bins, dtype=np.int64)
    if _jit.use_numba:
        return _scan_numba(hist, n_bins, float(G), float(H), float(C), float(min_data), float(min_hess), float(lam))
    return _scan_numpy(hist, n_bins, G, H, C, min_data, min_hess, lam)


# -- tree traversal --------------------------------------------------------------------

@njit
def _goes_left(x, is_cat, thr, default_left, cat_codes, cat_start, cat_len):
    if np.isnan(x):
        return default_left
    if is_cat:
        code = np.int64(x)  # truncates toward zero
        if x < 0.0:
            return default_left
        for q in range(cat_start, cat_start + cat_len):
            if cat_codes[q] == code:
                return True
        return False
    return x <= thr


@njit
def _leaves_numba(X, root, feature, threshold, default_left, is_cat, left, right, cat_start, cat_len, cat_codes):
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = root
        while left[node] >= 0:
            f = feature[node]
            if _goes_left(X[i, f], is_cat[node], threshold[node], default_left[node], cat_codes, cat_start[node], cat_len[node]):
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@njit
def _predict_numba(X, roots, feature, threshold, default_left, is_cat, left, right, value, cat_start, cat_len, cat_codes, scale):
    n = X.shape[0]
    out = np.zeros(n)
    for t in range(roots.shape[0]):
        root = roots[t]
        for i in range(n):
            node = root
            while left[node] >= 0:
                f = feature[node]
                if _goes_left(X[i, f], is_cat[node], threshold[node], default_left[node], cat_codes, cat_start[node], cat_len[node]):
                    node = left[node]
                else:
                    node = right[node]
            out[i] += scale * value[node]
    return out


def _leaves_numpy(X, root, feature, threshold, default_left, is_cat, left, right, cat_start, cat_len, cat_codes):
    n = X.shape[0]
    node = np.full(n, root, dtype=np.int64)
    active = left[node] >= 0
    rows = np.arange(n)
    while active.any():
        idx = rows[active]
        nd = node[idx]
        x = X[idx, feature[nd]]
        nan = np.isnan(x)
        go = np.where(nan, default_left[nd], x <= threshold[nd])
        cat = is_cat[nd]
        if cat.any():
            ci = np.flatnonzero(cat)
            for q in ci:
                xv = x[q]
                if np.isnan(xv) or xv < 0:
                    go[q] = default_left[nd[q]]
                else:
                    s, L = cat_start[nd[q]], cat_len[nd[q]]
                    go[q] = int(xv) in cat_codes[s:s + L]
        node[idx] = np.where(go, left[nd], right[nd])
        active = left[node] >= 0
    return node


def tree_leaves(X, tree_arrays, root=0):
    """Node index of the leaf reached by each row of ``X``."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    a = tree_arrays
    args = (a["feature"], a["threshold"], a["default_left"], a["is_cat"], a["left"], a["right"],
            a["cat_start"], a["cat_len"], a["cat_codes"])
    if _jit.use_numba:
        return _leaves_numba(X, root, *args)
    return _leaves_numpy(X, root, *args)


def predict_forest(X, forest, scale):
    """``scale * sum`` of leaf values over every tree in a flattened forest."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    a = forest
    if len(a["roots"]) == 0:
        return np.zeros(X.shape[0])
    if _jit.use_numba:
        return _predict_numba(X, a["roots"], a["feature"], a["threshold"], a["default_left"], a["is_cat"],
                              a["left"], a["right"], a["value"], a["cat_start"], a["cat_len"], a["cat_codes"],
                              float(scale))
    out = np.zeros(X.shape[0])
    args = (a["feature"], a["threshold"], a["default_left"], a["is_cat"], a["left"], a["right"],
            a["cat_start"], a["cat_len"], a["cat_codes"])
    for root in a["roots"]:
        leaves = _leaves_numpy(X, int(root), *args)
        out += scale * a["value"][leaves]
    return out


# -- categorical split scan --------------------------------------------------------------

@njit
def _cat_order_numba(stats, nb, cap):
    present = np.empty(nb, dtype=np.int64)
    k = 0
    for b in range(nb):
        if stats[b, 2] > 0:
            present[k] = b
            k += 1
    present = present[:k]
    if k <= cap:
        ratio = np.empty(k)
        for i in range(k):
            h = stats[present[i], 1]
            ratio[i] = stats[present[i], 0] / h if h > 0 else 0.0
        return present[np.argsort(ratio, kind="mergesort")], False
    counts = np.empty(k)
    for i in range(k):
        counts[i] = -stats[present[i], 2]
    return present[np.argsort(counts, kind="mergesort")][:cap], True


@njit
def _scan_cat_numba(stats, nb, G, H, C, min_data, min_hess, lam, cap):
    order, single = _cat_order_numba(stats, nb, cap)
    mask = np.zeros(nb, dtype=np.bool_)
    best_gain = -np.inf
    best_j = -1
    best_left = False
    parent = G * G / (H + lam)
    gm, hm, cm = stats[nb, 0], stats[nb, 1], stats[nb, 2]
    n_cand = order.shape[0] + 1 if single else order.shape[0]
    gl = 0.0
    hl = 0.0
    cl = 0.0
    for j in range(n_cand):
        if single:
            if j < order.shape[0]:
                b = order[j]
                gl, hl, cl = stats[b, 0], stats[b, 1], stats[b, 2]
            else:
                # every present category on the left
                gl, hl, cl = G - gm, H - hm, C - cm
        else:
            b = order[j]
            gl += stats[b, 0]
            hl += stats[b, 1]
            cl += stats[b, 2]
        for side in range(2):
            if side == 0:
                if cm == 0.0:
                    continue
                gL, hL, cL = gl + gm, hl + hm, cl + cm
            else:
                gL, hL, cL = gl, hl, cl
            gR, hR, cR = G - gL, H - hL, C - cL
            if cL < min_data or cR < min_data or hL < min_hess or hR < min_hess:
                continue
            gain = gL * gL / (hL + lam) + gR * gR / (hR + lam) - parent
            if gain > best_gain:
                best_gain = gain
                best_j = j
                best_left = side == 0
    if best_j >= 0:
        if single and best_j < order.shape[0]:
            mask[order[best_j]] = True
        elif single:
            for b in range(nb):
                mask[b] = stats[b, 2] > 0
        else:
            for q in range(best_j + 1):
                mask[order[q]] = True
    return best_gain, mask, best_left


def _scan_cat_numpy(stats, nb, G, H, C, min_data, min_hess, lam, cap):
    mask = np.zeros(nb, dtype=bool)
    present = np.flatnonzero(stats[:nb, 2] > 0)
    k = len(present)
    single = k > cap
    if single:
        order = present[np.argsort(-stats[present, 2], kind="stable")][:cap]
        # last candidate: every present category, i.e. the node total minus the missing bin
        left = np.vstack([stats[order], (np.array([G, H, C]) - stats[nb])[None, :]])
    else:
        h = stats[present, 1]
        ratio = np.where(h > 0, stats[present, 0] / np.where(h > 0, h, 1.0), 0.0)
        order = present[np.argsort(ratio, kind="stable")]
        left = np.cumsum(stats[order], axis=0)
    if len(left) == 0:
        return -np.inf, mask, False
    miss = stats[nb]
    parent = G * G / (H + lam)
    table = np.full((len(left), 2), -np.inf)
    for side in (0, 1):
        if side == 0 and miss[2] == 0.0:
            continue
        L = left + miss if side == 0 else left
        gL, hL, cL = L[:, 0], L[:, 1], L[:, 2]
        gR, hR, cR = G - gL, H - hL, C - cL
        ok = (cL >= min_data) & (cR >= min_data) & (hL >= min_hess) & (hR >= min_hess)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = gL * gL / (hL + lam) + gR * gR / (hR + lam) - parent
        table[:, side] = np.where(ok, gain, -np.inf)
    flat = table.reshape(-1)
    i = int(np.argmax(flat))
    if flat[i] == -np.inf:
        return -np.inf, mask, False
    j = i // 2
    if single:
        if j < len(order):
            mask[order[j]] = True
        else:
            mask[present] = True
    else:
        mask[order[: j + 1]] = True
    return float(flat[i]), mask, i % 2 == 0


def scan_categorical(stats, nb, G, H, C, min_data, min_hess, lam, cap):
    """Best category subset for one feature's histogram ``stats`` (missing bin at ``nb``).

    With at most ``cap`` present categories, categories are sorted by
    gradient/hessian ratio and every prefix is tried. Otherwise the ``cap``
    most frequent categories are tried one-vs-rest, followed by the set of all
    present categories. Missing rows are tried on both sides. Returns
    ``(gain, left_mask, missing_left)`` with gain ``-inf`` if nothing is admissible.
    """
    if _jit.use_numba:
        return _scan_cat_numba(np.ascontiguousarray(stats), int(nb), float(G), float(H), float(C),
                               float(min_data), float(min_hess), float(lam), int(cap))
    return _scan_cat_numpy(stats, int(nb), G, H, C, min_data, min_hess, lam, int(cap))
