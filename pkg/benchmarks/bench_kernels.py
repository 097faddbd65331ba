"""Compare compiled and pure-Python kernels.

    python benchmarks/bench_kernels.py [--trees N]
"""
import argparse
import importlib
import os
import sys
import time

import numpy as np


def _timed(fn, repeat=3):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(backend: str, n_trees: int):
    os.environ["SOMNADHERE_PURE_PYTHON"] = "1" if backend == "python" else "0"
    from somnadhere import forest, kernels
    importlib.reload(kernels)
    importlib.reload(forest)
    if kernels.BACKEND != backend:
        return None
    rng = np.random.default_rng(0)
    X = rng.normal(size=(1200, 38))
    y = (X[:, 3] + rng.normal(size=1200) > 0.5).astype(float)
    rate = rng.uniform(12, 18, 960)
    cv = rng.uniform(0.05, 0.3, 960)
    noise = rng.normal(size=12000)
    fit = _timed(lambda: forest.rf_train(X, y, n_trees=n_trees, seed=0), repeat=1)
    f = forest.rf_train(X, y, n_trees=n_trees, seed=0)
    pred = _timed(lambda: forest.rf_predict(f, X))
    breath = _timed(lambda: kernels.breath_onsets(rate, cv, 30.0, 960 * 30.0, noise))
    return {"rf_train": fit, "rf_predict": pred, "breath_onsets": breath}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trees", type=int, default=20)
    args = ap.parse_args(argv)
    rows = {b: run(b, args.trees) for b in ("cython", "python")}
    if rows["cython"] is None:
        print("compiled extension not built; only the Python backend is available")
    print(f"{'kernel':<16}{'cython (s)':>12}{'python (s)':>12}{'speedup':>10}")
    for k in rows["python"]:
        py = rows["python"][k]
        cy = rows["cython"][k] if rows["cython"] else float("nan")
        print(f"{k:<16}{cy:>12.4f}{py:>12.4f}{py / cy:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
