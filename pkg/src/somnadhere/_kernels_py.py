"""Pure-Python reference versions of the compiled kernels in ``_kernels.pyx``.

Both modules expose the same functions with the same semantics; the compiled
one is preferred at import time (see :mod:`somnadhere.kernels`).
"""
import numpy as np


def breath_onsets(rate_bpm, cv, epoch_s, total_s, noise):
    """Breath onset times (s) for a night with per-epoch breathing parameters.

    Breath ``k`` starts at ``t_k`` and lasts ``60 / rate * (1 + cv * noise[k])``
    seconds, using the rate and cv of the epoch containing ``t_k``. Intervals
    are floored at 30% of the nominal period. Generation stops at
    ``total_s`` or when ``noise`` is exhausted.
    """
    n_ep = len(rate_bpm)
    out = np.empty(len(noise), dtype=np.float64)
    t = 0.0
    k = 0
    while t < total_s and k < len(noise):
        ep = int(t / epoch_s)
        if ep >= n_ep:
            ep = n_ep - 1
        period = 60.0 / rate_bpm[ep]
        iv = period * (1.0 + cv[ep] * noise[k])
        if iv < 0.3 * period:
            iv = 0.3 * period
        out[k] = t
        t += iv
        k += 1
    return out[:k]


def best_split(X, y, w, features, min_leaf):
    """Best Gini split over ``features`` for weighted binary labels.

    ``w`` holds per-row integer weights (bootstrap multiplicities). Returns
    ``(feature, threshold, impurity_decrease)``; ``feature == -1`` when no
    split separates the rows. Thresholds are midpoints between consecutive
    distinct values, and ties in the decrease keep the first candidate.
    """
    n = X.shape[0]
    w_tot = float(w.sum())
    pos_tot = float((w * y).sum())
    parent = 1.0 - (pos_tot / w_tot) ** 2 - (1.0 - pos_tot / w_tot) ** 2
    best_f, best_thr, best_gain = -1, 0.0, 0.0
    for f in features:
        col = X[:, f]
        order = np.argsort(col, kind="mergesort")
        xs = col[order]
        ws = w[order]
        ps = ws * y[order]
        wl = 0.0
        pl = 0.0
        for i in range(n - 1):
            wl += ws[i]
            pl += ps[i]
            if xs[i] == xs[i + 1]:
                continue
            wr = w_tot - wl
            if wl < min_leaf or wr < min_leaf:
                continue
            pr = pos_tot - pl
            gl = 1.0 - (pl / wl) ** 2 - (1.0 - pl / wl) ** 2
            gr = 1.0 - (pr / wr) ** 2 - (1.0 - pr / wr) ** 2
            gain = parent - (wl * gl + wr * gr) / w_tot
            if gain > best_gain + 1e-12:
                best_gain = gain
                best_f = f
                best_thr = 0.5 * (xs[i] + xs[i + 1])
    return best_f, best_thr, best_gain


def tree_predict(feature, threshold, left, right, value, X):
    """Leaf value for each row of ``X`` by walking flat node arrays."""
    out = np.empty(X.shape[0], dtype=np.float64)
    for r in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[r, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] = value[node]
    return out
