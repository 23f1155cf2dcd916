# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_fallback``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def topk_counts(S, labels, Py_ssize_t num_classes, Py_ssize_t k):
    cdef const double[:, ::1] s = np.ascontiguousarray(S, dtype=np.float64)
    cdef const long long[::1] lab = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t n = s.shape[0], a = s.shape[1]
    out = np.zeros((a, num_classes), dtype=np.int64)
    cdef long long[:, ::1] counts = out
    cdef Py_ssize_t[::1] best = np.empty(k, dtype=np.intp)
    cdef Py_ssize_t j, p, t, filled, pos
    cdef double val
    for j in range(n):
        filled = 0
        # insertion into a descending list; strict > keeps lower index ahead on ties
        for p in range(a):
            val = s[j, p]
            if filled == k and val <= s[j, best[k - 1]]:
                continue
            pos = filled if filled < k else k - 1
            while pos > 0 and val > s[j, best[pos - 1]]:
                if pos < k:
                    best[pos] = best[pos - 1]
                pos -= 1
            best[pos] = p
            if filled < k:
                filled += 1
        for t in range(filled):
            counts[best[t], lab[j]] += 1
    return out


def sq_distances(X, C):
    cdef const double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] c = np.ascontiguousarray(C, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], v = c.shape[0], d = x.shape[1]
    out = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, t
    cdef double acc, diff
    for i in range(n):
        for j in range(v):
            acc = 0.0
            for t in range(d):
                diff = x[i, t] - c[j, t]
                acc += diff * diff
            o[i, j] = acc
    return out


def kmeans_assign(X, C):
    d = sq_distances(X, C)
    cdef double[:, ::1] dist = d
    cdef Py_ssize_t n = dist.shape[0], v = dist.shape[1]
    labels = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    cdef long long[::1] lab = labels
    cdef double[::1] bd = best
    cdef Py_ssize_t i, j
    for i in range(n):
        lab[i] = 0
        bd[i] = dist[i, 0]
        for j in range(1, v):
            if dist[i, j] < bd[i]:
                bd[i] = dist[i, j]
                lab[i] = j
    return labels, best


def rbf_gram(X, double gamma):
    d = sq_distances(X, X)
    cdef double[:, ::1] g = d
    cdef Py_ssize_t n = g.shape[0], i, j
    for i in range(n):
        for j in range(n):
            g[i, j] = exp(-gamma * g[i, j])
    return d
