"""Minimal reverse-mode autodiff over numpy arrays.

A Tensor wraps a float32/float64 ndarray and, when gradients are enabled,
remembers how it was produced so that backward() can push adjoints to every
reachable leaf. Only the operations the separation network needs exist; shape
mismatches are hard errors (no silent broadcasting outside bias-add, scalars
and explicit expand()).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class ShapeError(ValueError):
    pass


class Tensor:
    """n-d array with optional reverse-mode gradient.

    Leaves created with requires_grad=True carry a zeroed grad buffer from
    the start; graph nodes receive theirs during backward(). Gradients
    accumulate across backward calls until zero_grad() is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents = ()
        self._vjp = None

    # -- construction ------------------------------------------------------

    @staticmethod
    def _node(data, parents, vjp):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._parents = ()
        out._vjp = None
        out.requires_grad = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        return out

    # -- basic properties --------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad[...] = 0.0

    # -- autodiff ----------------------------------------------------------

    def backward(self):
        backward(self)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)


@dataclass
class Param:
    """Named trainable tensor; names are unique within a model."""

    name: str
    tensor: Tensor

    def __post_init__(self):
        if not self.tensor.requires_grad:
            raise ValueError(f"param {self.name!r} must require grad")

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


def backward(loss):
    """Populate grads of every reachable requires_grad tensor.

    Repeated calls accumulate; call zero_grad on leaves between steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    topo = _toposort(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in topo:
        if node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if parent.requires_grad and g is not None:
                parent._accumulate(g)
        if node is not loss:
            node.grad = None  # graph-internal adjoints are transient
            node._parents = ()
            node._vjp = None


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if id(parent) not in visited and parent._vjp is not None:
                visited.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
            visited.add(id(parent))
        if not advanced:
            order.append(node)
            stack.pop()
    order.reverse()
    return order


# -- helpers ---------------------------------------------------------------


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _coerce_pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def _binary_shapes_ok(a, b):
    return a.shape == b.shape or a.size == 1 or b.size == 1


def _reduce_to(g, shape):
    """Sum an upstream grad down to `shape` (scalar operands only)."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape).astype(g.dtype)


# -- elementwise arithmetic -------------------------------------------------


def add(a, b):
    a, b = _coerce_pair(a, b)
    if not _binary_shapes_ok(a, b):
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def vjp(g):
        return (_reduce_to(g, a.shape), _reduce_to(g, b.shape))

    return Tensor._node(out, (a, b), vjp)


def sub(a, b):
    a, b = _coerce_pair(a, b)
    if not _binary_shapes_ok(a, b):
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    out = a.data - b.data

    def vjp(g):
        return (_reduce_to(g, a.shape), _reduce_to(-g, b.shape))

    return Tensor._node(out, (a, b), vjp)


def mul(a, b):
    a, b = _coerce_pair(a, b)
    if not _binary_shapes_ok(a, b):
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = a.data * b.data

    def vjp(g):
        return (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape))

    return Tensor._node(out, (a, b), vjp)


def div(a, b):
    a, b = _coerce_pair(a, b)
    if not _binary_shapes_ok(a, b):
        raise ShapeError(f"div: shape mismatch {a.shape} vs {b.shape}")
    out = a.data / b.data

    def vjp(g):
        return (
            _reduce_to(g / b.data, a.shape),
            _reduce_to(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor._node(out, (a, b), vjp)


def neg(a):
    return Tensor._node(-a.data, (a,), lambda g: (-g,))


def pow_(a, p):
    """Elementwise a**p for a python scalar exponent."""
    out = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1),)

    return Tensor._node(out, (a,), vjp)


def exp(a):
    out = np.exp(a.data)
    return Tensor._node(out, (a,), lambda g: (g * out,))


def log(a):
    return Tensor._node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return Tensor._node(out, (a,), lambda g: (g * 0.5 / out,))


def abs_(a):
    # subgradient 0 at exactly 0
    out = np.abs(a.data)
    return Tensor._node(out, (a,), lambda g: (g * np.sign(a.data),))


def tanh(a):
    out = np.tanh(a.data)
    return Tensor._node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = _sigmoid_np(a.data)
    return Tensor._node(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- reductions -------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.full_like(a.data, 1.0) * g,)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return Tensor._node(np.asarray(out, dtype=a.dtype), (a,), vjp)


def mean_(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    out = np.mean(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.full_like(a.data, 1.0 / n) * g,)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy() / n,)

    return Tensor._node(np.asarray(out, dtype=a.dtype), (a,), vjp)


# -- structure --------------------------------------------------------------


def reshape(a, shape):
    out = a.data.reshape(shape)
    src_shape = a.shape
    return Tensor._node(out, (a,), lambda g: (g.reshape(src_shape),))


def transpose(a, axes):
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))
    return Tensor._node(out, (a,), lambda g: (np.transpose(g, inv),))


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along axis."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}, {start + length}) out of range for axis {axis} of size {a.shape[axis]}"
        )
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = a.data[sl].copy()

    def vjp(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return Tensor._node(out, (a,), vjp)


def concat(tensors, axis):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._node(out, tuple(tensors), vjp)


def flip(a, axis):
    out = np.flip(a.data, axis=axis).copy()
    return Tensor._node(out, (a,), lambda g: (np.flip(g, axis=axis).copy(),))


def expand(a, shape):
    """Explicit broadcast of singleton axes to `shape` (same rank)."""
    if a.ndim != len(shape):
        raise ShapeError(f"expand: rank mismatch {a.shape} -> {shape}")
    for da, ds in zip(a.shape, shape):
        if da != ds and da != 1:
            raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (da, ds) in enumerate(zip(a.shape, shape)) if da == 1 and ds != 1)
    out = np.broadcast_to(a.data, shape).copy()

    def vjp(g):
        return (np.sum(g, axis=axes, keepdims=True) if axes else g,)

    return Tensor._node(out, (a,), vjp)


def matmul(a, b):
    """Batched matrix product; leading dims must match exactly."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: operands must have rank >= 2")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ {a.shape[-1]} vs {b.shape[-2]}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        return (
            np.matmul(g, np.swapaxes(b.data, -1, -2)),
            np.matmul(np.swapaxes(a.data, -1, -2), g),
        )

    return Tensor._node(out, (a, b), vjp)


# -- per-axis affine helpers -------------------------------------------------


def _axis_view(vec, ndim, axis):
    shape = [1] * ndim
    shape[axis] = -1
    return vec.reshape(shape)


def channel_scale(a, s, axis):
    """Multiply by a 1-d vector laid along `axis` (LayerScale / norm gain)."""
    s = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=a.dtype))
    if s.ndim != 1 or s.shape[0] != a.shape[axis]:
        raise ShapeError(f"channel_scale: vector {s.shape} does not fit axis {axis} of {a.shape}")
    sv = _axis_view(s.data, a.ndim, axis)
    out = a.data * sv
    red = tuple(i for i in range(a.ndim) if i != axis)

    def vjp(g):
        return (g * sv, np.sum(g * a.data, axis=red))

    return Tensor._node(out, (a, s), vjp)


def channel_bias(a, b, axis):
    """Add a 1-d vector laid along `axis` (bias-add)."""
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=a.dtype))
    if b.ndim != 1 or b.shape[0] != a.shape[axis]:
        raise ShapeError(f"channel_bias: vector {b.shape} does not fit axis {axis} of {a.shape}")
    out = a.data + _axis_view(b.data, a.ndim, axis)
    red = tuple(i for i in range(a.ndim) if i != axis)

    def vjp(g):
        return (g, np.sum(g, axis=red))

    return Tensor._node(out, (a, b), vjp)


def outer_scale(w, m):
    """out[..., i, j] = w[..., i] * m[i, j] for a constant matrix m."""
    m = np.asarray(m, dtype=w.dtype)
    if m.ndim != 2 or m.shape[0] != w.shape[-1]:
        raise ShapeError(f"outer_scale: matrix {m.shape} does not fit {w.shape}")
    out = w.data[..., :, None] * m

    def vjp(g):
        return (np.sum(g * m, axis=-1),)

    return Tensor._node(out, (w,), vjp)
