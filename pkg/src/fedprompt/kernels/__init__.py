"""Kernel backend selection.

Two interchangeable backends provide the dense kernels used by the autodiff
core: a compiled Cython extension (preferred when built) and a numpy
reference. Selection happens once at import; `FEDPROMPT_KERNELS=numpy` or
`=compiled` forces a backend, and `set_backend` switches at runtime (used by
tests and the benchmark).

Backends agree to within float reassociation error, not bit-exactly, so a
given run is reproducible only under the backend it ran with.
"""

import os

from . import numpy_backend

try:
    from . import _fastcore
except ImportError:
    _fastcore = None

_BACKENDS = {"numpy": numpy_backend}
if _fastcore is not None:
    _BACKENDS["compiled"] = _fastcore

_active = _BACKENDS.get("compiled", numpy_backend)

_forced = os.environ.get("FEDPROMPT_KERNELS")
if _forced:
    if _forced not in _BACKENDS:
        raise ImportError(
            f"FEDPROMPT_KERNELS={_forced!r} but only {sorted(_BACKENDS)} are available"
        )
    _active = _BACKENDS[_forced]


def available_backends():
    return sorted(_BACKENDS)


def get_backend():
    return _active.NAME


def set_backend(name):
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {sorted(_BACKENDS)}")
    _active = _BACKENDS[name]


def matmul(a, b):
    return _active.matmul(a, b)


def matmul_nt(a, b):
    return _active.matmul_nt(a, b)


def matmul_tn(a, b):
    return _active.matmul_tn(a, b)


def softmax_rows(x):
    return _active.softmax_rows(x)


def softmax_rows_backward(y, gy):
    return _active.softmax_rows_backward(y, gy)


def layer_norm(x, eps):
    return _active.layer_norm(x, eps)


def layer_norm_backward(x, gy, eps):
    return _active.layer_norm_backward(x, gy, eps)
