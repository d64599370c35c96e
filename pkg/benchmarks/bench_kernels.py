"""Time the hot kernels under both backends and check they agree.

    python3 benchmarks/bench_kernels.py [--rows 20000] [--repeat 5]

Each kernel runs once per backend to warm up (numba compiles on first call),
then ``--repeat`` timed calls; the table reports the best time.
"""
import argparse
import time

import numpy as np

from tabdoor import _jit, kernels
from tabdoor.gbdt import BinnedData, GbdtParams, fit


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def _cases(n_rows, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n_rows, 8))
    X[:, 7] = rng.integers(0, 40, n_rows)
    X[rng.uniform(size=X.shape) < 0.02] = np.nan
    y = X[:, 0] * 2 + np.nan_to_num(X[:, 1]) ** 2 + (X[:, 7] == 3) * 5 + rng.normal(size=n_rows)
    y = np.nan_to_num(y)
    data = BinnedData(X, 255, categorical=[7])
    rows = np.arange(n_rows, dtype=np.int64)
    grad, hess = rng.normal(size=n_rows), np.ones(n_rows)
    feats = np.arange(X.shape[1], dtype=np.int64)
    hist = kernels.build_hist(data.binned, rows, grad, hess, feats, data.n_slots)
    model = fit(X, y, GbdtParams(num_iterations=50, num_leaves=31, seed=seed), "regression")
    forest = model.forest()
    pts = rng.normal(size=(min(n_rows, 4000), 6))

    return {
        "build_hist": lambda: kernels.build_hist(data.binned, rows, grad, hess, feats, data.n_slots),
        "scan_numeric": lambda: kernels.scan_numeric(hist[:7], np.asarray(data.n_bins[:7], dtype=np.int64),
                                                     grad.sum(), hess.sum(), float(n_rows), 20, 1e-3, 0.0),
        "predict_forest": lambda: kernels.predict_forest(X, forest, 0.1),
        "knn_indices": lambda: kernels.knn_indices(pts, 5),
        "gbdt_fit_50_rounds": lambda: fit(X, y, GbdtParams(num_iterations=50, num_leaves=31, seed=seed),
                                          "regression").predict(X[:100]),
    }


def _agree(a, b):
    if isinstance(a, tuple):
        return all(_agree(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float), rtol=1e-9, atol=1e-9, equal_nan=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if not _jit.HAVE_NUMBA:
        print("numba unavailable (or TABDOOR_DISABLE_NUMBA set): timing the numpy kernels only")
    backends = ["numpy"] + (["numba"] if _jit.HAVE_NUMBA else [])
    results = {}
    for b in backends:
        prev = _jit.set_backend(b)
        try:
            for name, fn in _cases(args.rows, args.seed).items():
                results[(name, b)] = _best(fn, args.repeat)
        finally:
            _jit.set_backend(prev)

    names = list(dict.fromkeys(n for n, _ in results))
    print(f"{'kernel':<22}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}  agree")
    for name in names:
        t_np, out_np = results[(name, "numpy")]
        if (name, "numba") in results:
            t_nb, out_nb = results[(name, "numba")]
            print(f"{name:<22}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>9.1f}x  {_agree(out_np, out_nb)}")
        else:
            print(f"{name:<22}{t_np * 1e3:>12.2f}{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
