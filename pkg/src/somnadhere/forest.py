"""Random-forest baseline: bootstrap-aggregated Gini trees.

Split search and traversal run in :mod:`somnadhere.kernels`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ForestError(ValueError):
    pass


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray  # intp, -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # positive fraction at each node
    depth: np.ndarray

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def predict(self, X: np.ndarray) -> np.ndarray:
        return kernels.tree_predict(self.feature, self.threshold, self.left, self.right, self.value, X)


@dataclass(frozen=True)
class Forest:
    trees: tuple
    n_features: int
    impute: np.ndarray  # per-feature training medians
    oob_score: np.ndarray = field(repr=False, default=None)  # NaN for rows never out of bag


def _build_tree(X, y, counts, max_depth, n_candidates, rng) -> Tree:
    n_feat = X.shape[1]
    feature, threshold, left, right, value, depth = [], [], [], [], [], []

    def new_node(d, rows):
        w = counts[rows]
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float((w * y[rows]).sum() / w.sum()))
        depth.append(d)
        return len(feature) - 1

    root_rows = np.flatnonzero(counts > 0)
    stack = [(new_node(0, root_rows), root_rows)]
    while stack:
        node, rows = stack.pop()
        v = value[node]
        if depth[node] >= max_depth or rows.size < 2 or v in (0.0, 1.0):
            continue
        cand = np.sort(rng.choice(n_feat, size=n_candidates, replace=False)).astype(np.intp)
        Xn = np.ascontiguousarray(X[rows])
        f, thr, gain = kernels.best_split(Xn, y[rows], counts[rows], cand, 1.0)
        if f < 0:
            continue
        go_left = Xn[:, f] <= thr
        feature[node] = int(f)
        threshold[node] = float(thr)
        lr, rr = rows[go_left], rows[~go_left]
        left[node] = new_node(depth[node] + 1, lr)
        right[node] = new_node(depth[node] + 1, rr)
        stack.append((right[node], rr))
        stack.append((left[node], lr))
    return Tree(np.array(feature, dtype=np.intp), np.array(threshold, dtype=np.float64),
                np.array(left, dtype=np.intp), np.array(right, dtype=np.intp),
                np.array(value, dtype=np.float64), np.array(depth, dtype=np.intp))


def _impute(X: np.ndarray, medians: np.ndarray) -> np.ndarray:
    X = np.array(X, dtype=np.float64, order="C")
    bad = np.isnan(X)
    if bad.any():
        X[bad] = np.broadcast_to(medians, X.shape)[bad]
    return X


def rf_train(X, y, n_trees: int = 1000, max_depth: int = 10, seed: int = 0) -> Forest:
    """Fit a random forest of Gini trees on bootstrap samples.

    Each split considers ``floor(sqrt(F))`` randomly chosen features. NaN
    entries are replaced by the column's training median (0 for all-NaN
    columns) and the same medians are reused at prediction time.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ForestError(f"X shape {X.shape} incompatible with {y.size} labels")
    if np.isinf(X).any():
        raise ForestError("features must be finite or NaN (missing)")
    if not np.isin(y, (0.0, 1.0)).all() or np.unique(y).size < 2:
        raise ForestError("rf_train needs binary labels with both classes present")
    if n_trees < 1 or max_depth < 1:
        raise ForestError("n_trees and max_depth must be positive")
    n, n_feat = X.shape
    with np.errstate(all="ignore"):
        med = np.nanmedian(np.where(np.isnan(X).all(axis=0), 0.0, X), axis=0) if n else np.zeros(n_feat)
    med = np.where(np.isnan(med), 0.0, med)
    Xi = _impute(X, med)
    n_cand = max(1, int(math.isqrt(n_feat)))
    trees = []
    oob_sum = np.zeros(n)
    oob_n = np.zeros(n)
    for t in range(n_trees):
        rng = np.random.default_rng([seed, t])
        counts = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(np.float64)
        tree = _build_tree(Xi, y, counts, max_depth, n_cand, rng)
        trees.append(tree)
        out = counts == 0
        if out.any():
            oob_sum[out] += tree.predict(np.ascontiguousarray(Xi[out]))
            oob_n[out] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        oob = np.where(oob_n > 0, oob_sum / np.maximum(oob_n, 1), np.nan)
    return Forest(tuple(trees), n_feat, med, oob)


def rf_predict(forest: Forest, X) -> np.ndarray:
    """Mean positive-leaf fraction over trees, in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != forest.n_features:
        raise ForestError(f"expected {forest.n_features} features, got {X.shape[1]}")
    Xi = _impute(X, forest.impute)
    total = np.zeros(Xi.shape[0])
    for tree in forest.trees:
        total += tree.predict(Xi)
    return total / len(forest.trees)
