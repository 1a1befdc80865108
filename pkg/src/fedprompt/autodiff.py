"""Minimal reverse-mode autodiff over dense float64 arrays.

The op set is deliberately small: matmul, elementwise add/mul/scale,
row/column concat and slice, row softmax, parameter-free layer norm,
sum/mean, cosine distance, and cross entropy. No broadcasting beyond what
those ops define. Each op builds a graph node holding a backward closure;
`backward` walks the graph from a scalar loss. Graphs are per-client and
share no mutable state, so independent tapes may run in parallel threads.

Tensors wrap C-contiguous float64 numpy arrays. Ops never mutate their
inputs; optimizers may rewrite leaf `.data` between graph builds.
"""

import threading
from contextlib import contextmanager

import numpy as np

from . import kernels as K
from .errors import ContractError, DegenerateInputError, ShapeError

_state = threading.local()


def grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread (evaluation fast path)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_array(values):
    # ascontiguousarray alone would promote scalars to shape (1,)
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim >= 1:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)


def _node(data, parents, backward_fn):
    """Create an op output; records the closure only when some parent needs it."""
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if needs:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def backward(loss):
    """Populate `.grad` on every requires_grad node reachable from `loss`.

    Leaves with requires_grad=False never receive a gradient buffer.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# ops


def matmul(a, b, transpose_b=False):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    inner_b = b.data.shape[1] if transpose_b else b.data.shape[0]
    if a.data.shape[1] != inner_b:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} x {b.data.shape}")
    if transpose_b:
        out = K.matmul_nt(a.data, b.data)
    else:
        out = K.matmul(a.data, b.data)

    def back(g):
        if transpose_b:
            _accumulate(a, K.matmul(g, b.data))
            _accumulate(b, K.matmul_tn(g, a.data))
        else:
            _accumulate(a, K.matmul_nt(g, b.data))
            _accumulate(b, K.matmul_tn(a.data, g))

    return _node(out, (a, b), back)


def add(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(a.data + b.data, (a, b), back)


def mul(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes differ: {a.data.shape} vs {b.data.shape}")

    def back(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _node(a.data * b.data, (a, b), back)


def scale(a, s):
    s = float(s)

    def back(g):
        _accumulate(a, g * s)

    return _node(a.data * s, (a,), back)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty sequence")
    if axis not in (0, 1):
        raise ShapeError("concat supports axis 0 or 1")
    if any(t.data.ndim != 2 for t in tensors):
        raise ShapeError("concat expects rank-2 operands")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            piece = g[lo:hi, :] if axis == 0 else g[:, lo:hi]
            _accumulate(t, piece)

    return _node(out, tuple(tensors), back)


def slice_rows(a, start, stop):
    if a.data.ndim != 2:
        raise ShapeError("slice_rows expects a rank-2 operand")
    if not (0 <= start < stop <= a.data.shape[0]):
        raise ShapeError(f"row slice [{start}:{stop}] outside shape {a.data.shape}")
    out = np.ascontiguousarray(a.data[start:stop, :])

    def back(g):
        full = np.zeros_like(a.data)
        full[start:stop, :] = g
        _accumulate(a, full)

    return _node(out, (a,), back)


def slice_cols(a, start, stop):
    if a.data.ndim != 2:
        raise ShapeError("slice_cols expects a rank-2 operand")
    if not (0 <= start < stop <= a.data.shape[1]):
        raise ShapeError(f"column slice [{start}:{stop}] outside shape {a.data.shape}")
    out = np.ascontiguousarray(a.data[:, start:stop])

    def back(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _accumulate(a, full)

    return _node(out, (a,), back)


def tensor_sum(a):
    def back(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    return _node(a.data.sum(), (a,), back)


def tensor_mean(a):
    n = a.data.size

    def back(g):
        _accumulate(a, np.full_like(a.data, float(g) / n))

    return _node(a.data.mean(), (a,), back)


def softmax_rows(a):
    if a.data.ndim == 1:
        raise ShapeError("softmax_rows expects a rank-2 operand; wrap vectors as (1, n)")
    y = K.softmax_rows(a.data)

    def back(g):
        _accumulate(a, K.softmax_rows_backward(y, g))

    return _node(y, (a,), back)


def layer_norm(a, eps=1e-6):
    if a.data.ndim != 2:
        raise ShapeError("layer_norm expects a rank-2 operand")
    y = K.layer_norm(a.data, eps)

    def back(g):
        _accumulate(a, K.layer_norm_backward(a.data, g, eps))

    return _node(y, (a,), back)


def cosine_distance(u, v):
    """1 - cos(u, v) for rank-1 tensors; errors on zero-norm inputs."""
    if u.data.ndim != 1 or v.data.ndim != 1:
        raise ShapeError("cosine_distance expects rank-1 operands")
    if u.data.shape != v.data.shape:
        raise ShapeError(f"cosine_distance lengths differ: {u.data.shape} vs {v.data.shape}")
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine_distance of a zero vector")
    dot = float(u.data @ v.data)
    cos = dot / (nu * nv)

    def back(g):
        g = float(g)
        _accumulate(u, g * (-(v.data / (nu * nv)) + cos * u.data / (nu * nu)))
        _accumulate(v, g * (-(u.data / (nu * nv)) + cos * v.data / (nv * nv)))

    return _node(1.0 - cos, (u, v), back)


def cross_entropy(logits, label):
    """-log softmax(logits)[label]; accepts shape (C,) or (1, C)."""
    flat = logits.data.reshape(-1)
    c = flat.shape[0]
    label = int(label)
    if not 0 <= label < c:
        raise IndexError(f"label {label} out of range for {c} logits")
    shifted = flat - flat.max()
    lse = float(np.log(np.exp(shifted).sum()))
    loss = lse - float(shifted[label])
    probs = np.exp(shifted - lse)

    def back(g):
        grad = probs.copy()
        grad[label] -= 1.0
        _accumulate(logits, float(g) * grad.reshape(logits.data.shape))

    return _node(loss, (logits,), back)
