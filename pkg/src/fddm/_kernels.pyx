# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-class kernels. Mirrors ``fddm._kernels_py`` one-to-one."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()

IMPLEMENTATION = "cython"


def masked_mean(double[:, ::1] X, double[:, ::1] Y):
    cdef Py_ssize_t B = X.shape[0], D = X.shape[1], C = Y.shape[1]
    cdef Py_ssize_t i, c, d
    cdef double y, inv
    M_arr = np.zeros((C, D), dtype=np.float64)
    counts_arr = np.zeros(C, dtype=np.float64)
    cdef double[:, ::1] M = M_arr
    cdef double[::1] counts = counts_arr
    for i in range(B):
        for c in range(C):
            y = Y[i, c]
            if y != 0.0:
                counts[c] += y
                for d in range(D):
                    M[c, d] += y * X[i, d]
    for c in range(C):
        if counts[c] > 0.0:
            inv = 1.0 / counts[c]
            for d in range(D):
                M[c, d] = M[c, d] * inv
    return M_arr, counts_arr


def masked_mean_backward(double[:, ::1] G, double[:, ::1] Y, double[::1] counts):
    cdef Py_ssize_t B = Y.shape[0], C = Y.shape[1], D = G.shape[1]
    cdef Py_ssize_t i, c, d
    cdef double w
    out_arr = np.zeros((B, D), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(B):
        for c in range(C):
            if Y[i, c] != 0.0 and counts[c] > 0.0:
                w = Y[i, c] / counts[c]
                for d in range(D):
                    out[i, d] += w * G[c, d]
    return out_arr


cdef inline void _log_softmax_row(double[:, ::1] A, Py_ssize_t k, double tau,
                                  double[::1] out) noexcept nogil:
    cdef Py_ssize_t d, D = A.shape[1]
    cdef double m = A[k, 0] / tau
    cdef double s = 0.0, v
    for d in range(1, D):
        v = A[k, d] / tau
        if v > m:
            m = v
    for d in range(D):
        s += exp(A[k, d] / tau - m)
    s = log(s)
    for d in range(D):
        out[d] = A[k, d] / tau - m - s


def softmax_kl_rows(double[:, ::1] T, double[:, ::1] S, double tau):
    cdef Py_ssize_t K = T.shape[0], D = T.shape[1]
    cdef Py_ssize_t k, d
    cdef double acc, p
    kl_arr = np.zeros(K, dtype=np.float64)
    grad_arr = np.zeros((K, D), dtype=np.float64)
    cdef double[::1] kl = kl_arr
    cdef double[:, ::1] grad = grad_arr
    cdef double[::1] lp = np.empty(D, dtype=np.float64)
    cdef double[::1] lq = np.empty(D, dtype=np.float64)
    for k in range(K):
        _log_softmax_row(T, k, tau, lp)
        _log_softmax_row(S, k, tau, lq)
        acc = 0.0
        for d in range(D):
            p = exp(lp[d])
            acc += p * (lp[d] - lq[d])
            grad[k, d] = (exp(lq[d]) - p) / tau
        kl[k] = acc
    return kl_arr, grad_arr


def cosine_matrix(double[:, ::1] Q):
    cdef Py_ssize_t K = Q.shape[0], C = Q.shape[1]
    cdef Py_ssize_t a, b, j
    cdef double s, v
    norms_arr = np.zeros(K, dtype=np.float64)
    out_arr = np.zeros((K, K), dtype=np.float64)
    cdef double[::1] norms = norms_arr
    cdef double[:, ::1] out = out_arr
    for a in range(K):
        s = 0.0
        for j in range(C):
            s += Q[a, j] * Q[a, j]
        norms[a] = sqrt(s)
    for a in range(K):
        for b in range(a, K):
            s = 0.0
            for j in range(C):
                s += (Q[a, j] / norms[a]) * (Q[b, j] / norms[b])
            v = s
            if v > 1.0:
                v = 1.0
            elif v < -1.0:
                v = -1.0
            out[a, b] = v
            out[b, a] = v
    return out_arr, norms_arr


def cosine_matrix_backward(double[:, ::1] G, double[:, ::1] Q,
                           double[:, ::1] Kmat, double[::1] norms):
    cdef Py_ssize_t K = Q.shape[0], C = Q.shape[1]
    cdef Py_ssize_t a, b, j
    cdef double gs, row
    out_arr = np.zeros((K, C), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for a in range(K):
        row = 0.0
        for b in range(K):
            gs = G[a, b] + G[b, a]
            row += gs * Kmat[a, b]
            for j in range(C):
                out[a, j] += gs * Q[b, j] / norms[b]
        for j in range(C):
            out[a, j] = (out[a, j] - row * Q[a, j] / norms[a]) / norms[a]
    return out_arr
