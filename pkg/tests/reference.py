"""Slow, obviously-correct reference implementations used as test oracles."""
import itertools

import numpy as np

from tabdoor.mlp import MlpConfig, data_loss, forward, gradients, init_weights


def brute_force_split(X, grad, hess, min_data, min_gain=0.0, lam=0.0, categorical=()):
    """Exhaustive best split over raw values.

    Numeric thresholds sit halfway between neighbouring distinct values, with
    ``+inf`` standing for "every present value left". Missing rows are tried
    on both sides. Ties go to the earlier feature, then the lower threshold,
    then missing-left. Categorical features try every subset of present codes.
    Returns ``None`` or ``(feature, threshold_or_subset, missing_left, gain)``.
    """
    G, H = grad.sum(), hess.sum()
    parent = G * G / (H + lam)
    best = None
    for j in range(X.shape[1]):
        x = X[:, j]
        miss = np.isnan(x)
        if j in categorical:
            codes = sorted(set(x[~miss].astype(int)))
            candidates = []
            for r in range(1, len(codes) + 1):
                for sub in itertools.combinations(codes, r):
                    candidates.append((frozenset(sub), np.isin(x, sub) & ~miss))
        else:
            vals = np.unique(x[~miss])
            cuts = list((vals[:-1] + vals[1:]) / 2.0) + [np.inf]
            candidates = [(t, (x <= t) & ~miss) for t in cuts]
        for rule, left in candidates:
            for missing_left in (True, False):
                if missing_left and not miss.any():
                    continue
                go = left | (miss & missing_left)
                cl, cr = go.sum(), (~go).sum()
                if cl < min_data or cr < min_data:
                    continue
                gl, hl = grad[go].sum(), hess[go].sum()
                gr, hr = G - gl, H - hl
                if hl < 1e-3 or hr < 1e-3:
                    continue
                gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent
                if best is None or gain > best[3] + 1e-12:
                    best = (j, rule, missing_left, gain)
    if best is None or best[3] <= 1e-10 * max(1.0, abs(parent)) or best[3] < min_gain:
        return None
    return best


def windowed_median(series, window):
    return [float(np.median(series[max(0, i - window + 1): i + 1])) for i in range(len(series))]


def numeric_gradient(f, x, eps=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def max_relative_gradient_error(model, X, y, class_weights=None, l2=0.0):
    gW, gb, _ = gradients(model, X, y, class_weights, l2)
    w = None
    if class_weights is not None:
        w = np.where(y > 0.5, class_weights[1], class_weights[0])

    def loss():
        return data_loss(model, X, y, w) + l2 * sum(float(np.sum(W * W)) for W in model.weights)

    worst = 0.0
    for params, grads in ((model.weights, gW), (model.biases, gb)):
        for p, g in zip(params, grads):
            num = numeric_gradient(loss, p)
            denom = np.maximum(np.abs(num) + np.abs(g), 1e-8)
            worst = max(worst, float((np.abs(num - g) / denom).max()))
    return worst


def random_gradient_case(seed):
    """A small random network whose pre-activations stay clear of the ReLU kink."""
    rng = np.random.default_rng(seed)
    while True:
        n_in = int(rng.integers(1, 5))
        hidden = tuple(int(h) for h in rng.integers(1, 6, size=int(rng.integers(1, 4))))
        task = "classification" if rng.uniform() < 0.5 else "regression"
        cfg = MlpConfig(hidden, n_inputs=n_in, task=task, seed=int(rng.integers(1 << 30)))
        model = init_weights(cfg)
        for b in model.biases:
            b[:] = rng.normal(scale=0.1, size=b.shape)
        X = rng.normal(size=(int(rng.integers(2, 9)), n_in))
        y = (rng.uniform(size=len(X)) < 0.5).astype(float) if task == "classification" else rng.normal(size=len(X))
        acts, _ = forward(model, X)
        pre = [a @ W + b for a, W, b in zip(acts[:-1], model.weights, model.biases)]
        if all((np.abs(z) > 1e-6).all() for z in pre[:-1]):
            return model, X, y
