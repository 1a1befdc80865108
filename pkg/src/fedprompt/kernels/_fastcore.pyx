# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the hot inner loops.

Same contracts as numpy_backend; plain C loops beat BLAS dispatch overhead
at the tiny matrix sizes this simulator runs (tens of rows, D <= 64).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

NAME = "compiled"


def matmul(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] c = out
    cdef Py_ssize_t i, j, p
    cdef double aip
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                c[i, j] += aip * b[p, j]
    return out


def matmul_nt(double[:, ::1] a, double[:, ::1] b):
    """a @ b.T"""
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[0]
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] c = out
    cdef Py_ssize_t i, j, p
    cdef double acc
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[j, p]
            c[i, j] = acc
    return out


def matmul_tn(double[:, ::1] a, double[:, ::1] b):
    """a.T @ b"""
    cdef Py_ssize_t k = a.shape[0], m = a.shape[1], n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] c = out
    cdef Py_ssize_t i, j, p
    cdef double api
    for p in range(k):
        for i in range(m):
            api = a[p, i]
            for j in range(n):
                c[i, j] += api * b[p, j]
    return out


def softmax_rows(double[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef Py_ssize_t i, j
    cdef double mx, s
    for i in range(m):
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(n):
            y[i, j] = exp(x[i, j] - mx)
            s += y[i, j]
        for j in range(n):
            y[i, j] /= s
    return out


def softmax_rows_backward(double[:, ::1] y, double[:, ::1] gy):
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1]
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] gx = out
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(m):
        dot = 0.0
        for j in range(n):
            dot += gy[i, j] * y[i, j]
        for j in range(n):
            gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return out


def layer_norm(double[:, ::1] x, double eps):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef Py_ssize_t i, j
    cdef double mu, var, d, inv
    for i in range(m):
        mu = 0.0
        for j in range(n):
            mu += x[i, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mu
            var += d * d
        var /= n
        inv = 1.0 / sqrt(var + eps)
        for j in range(n):
            y[i, j] = (x[i, j] - mu) * inv
    return out


def layer_norm_backward(double[:, ::1] x, double[:, ::1] gy, double eps):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] gx = out
    cdef Py_ssize_t i, j
    cdef double mu, var, d, inv, yij, gmean, gymean
    for i in range(m):
        mu = 0.0
        for j in range(n):
            mu += x[i, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mu
            var += d * d
        var /= n
        inv = 1.0 / sqrt(var + eps)
        gmean = 0.0
        gymean = 0.0
        for j in range(n):
            yij = (x[i, j] - mu) * inv
            gmean += gy[i, j]
            gymean += gy[i, j] * yij
        gmean /= n
        gymean /= n
        for j in range(n):
            yij = (x[i, j] - mu) * inv
            gx[i, j] = inv * (gy[i, j] - gmean - yij * gymean)
    return out
