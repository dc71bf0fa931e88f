# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled scoring and gradient kernels for factorization machines.

Same contract as ``fmdroid._kernels_py``. Per sample the work is
O(nnz * k + ncat^2 * k): category-wise latent sums are accumulated once and
the pairwise term is assembled from them.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, fabs

cnp.import_array()

ctypedef cnp.int64_t idx_t


cdef inline void _sums(const idx_t[::1] indices, idx_t start, idx_t end,
                       const double[:, ::1] V, const idx_t[::1] cat,
                       double[:, ::1] S, double[:, ::1] Q, Py_ssize_t ncat, Py_ssize_t k) noexcept nogil:
    cdef Py_ssize_t c, f
    cdef idx_t p, i
    cdef double v
    for c in range(ncat):
        for f in range(k):
            S[c, f] = 0.0
            Q[c, f] = 0.0
    for p in range(start, end):
        i = indices[p]
        c = cat[i]
        for f in range(k):
            v = V[i, f]
            S[c, f] += v
            Q[c, f] += v * v


cdef inline double _score(const idx_t[::1] indices, idx_t start, idx_t end, double w0,
                          const double[::1] w, const unsigned char[:, ::1] allowed,
                          double[:, ::1] S, double[:, ::1] Q, Py_ssize_t ncat, Py_ssize_t k) noexcept nogil:
    cdef Py_ssize_t c, d, f
    cdef idx_t p
    cdef double h = w0, acc
    for p in range(start, end):
        h += w[indices[p]]
    for c in range(ncat):
        if allowed[c, c]:
            acc = 0.0
            for f in range(k):
                acc += S[c, f] * S[c, f] - Q[c, f]
            h += 0.5 * acc
        for d in range(c + 1, ncat):
            if allowed[c, d]:
                acc = 0.0
                for f in range(k):
                    acc += S[c, f] * S[d, f]
                h += acc
    return h


def scores(const idx_t[::1] indptr, const idx_t[::1] indices, double w0, const double[::1] w,
           const double[:, ::1] V, const idx_t[::1] cat, const unsigned char[:, ::1] allowed):
    cdef Py_ssize_t m = indptr.shape[0] - 1
    cdef Py_ssize_t ncat = allowed.shape[0]
    cdef Py_ssize_t k = V.shape[1]
    cdef Py_ssize_t r
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] h = out
    cdef double[:, ::1] S = np.zeros((ncat, k))
    cdef double[:, ::1] Q = np.zeros((ncat, k))
    with nogil:
        for r in range(m):
            _sums(indices, indptr[r], indptr[r + 1], V, cat, S, Q, ncat, k)
            h[r] = _score(indices, indptr[r], indptr[r + 1], w0, w, allowed, S, Q, ncat, k)
    return out


def accumulate_gradient(const idx_t[::1] indptr, const idx_t[::1] indices, const idx_t[::1] rows,
                        const double[::1] y, double w0, const double[::1] w, const double[:, ::1] V,
                        const idx_t[::1] cat, const unsigned char[:, ::1] allowed,
                        double l2_w, double l2_v, double[::1] grad_w, double[:, ::1] grad_V):
    cdef Py_ssize_t ncat = allowed.shape[0]
    cdef Py_ssize_t k = V.shape[1]
    cdef Py_ssize_t b, c, d, f
    cdef idx_t r, p, i, start, end
    cdef double h, z, ez, sig, g, yr, wi, v, selfw
    cdef double loss_sum = 0.0, g0_sum = 0.0
    cdef double[:, ::1] S = np.zeros((ncat, k))
    cdef double[:, ::1] Q = np.zeros((ncat, k))
    cdef double[:, ::1] T = np.zeros((ncat, k))
    with nogil:
        for b in range(rows.shape[0]):
            r = rows[b]
            start = indptr[r]
            end = indptr[r + 1]
            _sums(indices, start, end, V, cat, S, Q, ncat, k)
            h = _score(indices, start, end, w0, w, allowed, S, Q, ncat, k)
            yr = y[r]
            z = -yr * h
            ez = exp(-fabs(z))
            if z >= 0:
                loss_sum += z + log1p(ez)
                sig = 1.0 / (1.0 + ez)
            else:
                loss_sum += log1p(ez)
                sig = ez / (1.0 + ez)
            g = -yr * sig
            g0_sum += g
            for c in range(ncat):
                for f in range(k):
                    T[c, f] = 0.0
                for d in range(ncat):
                    if allowed[c, d]:
                        for f in range(k):
                            T[c, f] += S[d, f]
            for p in range(start, end):
                i = indices[p]
                c = cat[i]
                wi = w[i]
                loss_sum += 0.5 * l2_w * wi * wi
                grad_w[i] += g + l2_w * wi
                selfw = 1.0 if allowed[c, c] else 0.0
                for f in range(k):
                    v = V[i, f]
                    loss_sum += 0.5 * l2_v * v * v
                    grad_V[i, f] += g * (T[c, f] - selfw * v) + l2_v * v
    return loss_sum, g0_sum
