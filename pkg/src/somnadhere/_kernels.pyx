# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Semantics match ``_kernels_py`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def breath_onsets(const double[::1] rate_bpm, const double[::1] cv, double epoch_s,
                  double total_s, const double[::1] noise):
    cdef Py_ssize_t n_ep = rate_bpm.shape[0]
    cdef Py_ssize_t n = noise.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double t = 0.0, period, iv
    cdef Py_ssize_t k = 0, ep
    while t < total_s and k < n:
        ep = <Py_ssize_t> (t / epoch_s)
        if ep >= n_ep:
            ep = n_ep - 1
        period = 60.0 / rate_bpm[ep]
        iv = period * (1.0 + cv[ep] * noise[k])
        if iv < 0.3 * period:
            iv = 0.3 * period
        out[k] = t
        t += iv
        k += 1
    return out_arr[:k]


def best_split(const double[:, ::1] X, const double[::1] y, const double[::1] w,
               const Py_ssize_t[::1] features, double min_leaf):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t fi, f, i, j
    cdef double w_tot = 0.0, pos_tot = 0.0
    for i in range(n):
        w_tot += w[i]
        pos_tot += w[i] * y[i]
    cdef double parent = 1.0 - (pos_tot / w_tot) ** 2 - (1.0 - pos_tot / w_tot) ** 2
    cdef Py_ssize_t best_f = -1
    cdef double best_thr = 0.0, best_gain = 0.0
    cdef double wl, pl, wr, pr, gl, gr, gain
    col_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] col = col_arr
    cdef Py_ssize_t[::1] order
    for fi in range(features.shape[0]):
        f = features[fi]
        for i in range(n):
            col[i] = X[i, f]
        order = np.argsort(col_arr, kind="mergesort").astype(np.intp)
        wl = 0.0
        pl = 0.0
        for i in range(n - 1):
            j = order[i]
            wl += w[j]
            pl += w[j] * y[j]
            if col[j] == col[order[i + 1]]:
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
                best_thr = 0.5 * (col[j] + col[order[i + 1]])
    return best_f, best_thr, best_gain


def tree_predict(const Py_ssize_t[::1] feature, const double[::1] threshold,
                 const Py_ssize_t[::1] left, const Py_ssize_t[::1] right,
                 const double[::1] value, const double[:, ::1] X):
    cdef Py_ssize_t n = X.shape[0], r, node
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for r in range(n):
        node = 0
        while feature[node] >= 0:
            if X[r, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] = value[node]
    return out_arr
