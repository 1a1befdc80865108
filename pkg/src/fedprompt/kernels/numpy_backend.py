"""Reference kernel implementations backed by numpy.

All functions take and return C-contiguous float64 arrays. This module is
the semantic reference: the compiled backend must agree with it to within
floating-point reassociation error (tests pin 1e-12 relative).
"""

import numpy as np

NAME = "numpy"


def matmul(a, b):
    return a @ b


def matmul_nt(a, b):
    """a @ b.T"""
    return np.ascontiguousarray(a @ b.T)


def matmul_tn(a, b):
    """a.T @ b"""
    return np.ascontiguousarray(a.T @ b)


def softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, gy):
    # d softmax: y * (g - sum(g * y))
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layer_norm(x, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def layer_norm_backward(x, gy, eps):
    n = x.shape[1]
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv
    gmean = gy.mean(axis=1, keepdims=True)
    gymean = (gy * y).sum(axis=1, keepdims=True) / n
    return inv * (gy - gmean - y * gymean)
