"""Minimal dense-tensor engine with reverse-mode differentiation.

Everything is float64 and numpy-backed. Ops record themselves on the
thread's active GradTape; GradTape.backward replays them in exact reverse
execution order. Broadcasting is deliberately restricted: a binary op takes
operands of identical shape, a scalar, or a 1-D vector matching the other
operand's last axis (bias/affine case). Anything else needs an explicit
reshape.
"""

import math
import threading
import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "concat",
    "grad_check",
    "index_rows",
    "layer_norm",
    "matmul",
    "maximum",
    "minimum",
    "multi_head_attention",
    "softmax",
]

_state = threading.local()


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable dense array of float64 values, optionally tracked for grad."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        return t

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return narrow(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


class GradTape:
    """Ordered record of differentiable ops executed while the tape is active.

    Use as a context manager around the forward pass, then call
    ``backward(loss)``. Gradients accumulate into ``.grad`` of the leaf
    tensors (tensors that were inputs but never outputs on this tape).
    A tape belongs to one thread; do not share it.
    """

    def __init__(self):
        self._entries = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._entries)

    def _record(self, out, inputs, backward):
        self._entries.append((out, inputs, backward))

    def backward(self, loss):
        """Propagate d(loss)/d(x) into leaf .grad fields, reverse op order."""
        if loss.data.shape != ():
            raise ValueError("backward requires a scalar loss")
        if not np.isfinite(loss.data):
            raise ValueError("loss is not finite")
        produced = {id(out) for out, _, _ in self._entries}
        grads = {id(loss): np.ones((), dtype=np.float64)}
        holders = {id(loss): loss}
        for out, inputs, backward in reversed(self._entries):
            g = grads.pop(id(out), None)
            holders.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    holders[key] = inp
        for key, g in grads.items():
            leaf = holders[key]
            if key in produced or not leaf.requires_grad:
                continue
            g = np.ascontiguousarray(g, dtype=np.float64)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


class no_grad:
    """Context manager suppressing tape recording for its body."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


def _wrap(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(out_data, inputs, backward):
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape = _active_tape()
        if tape is not None:
            tape._record(out, inputs, backward)
    return out


def _check_binary_shapes(a, b):
    """Allowed: identical shapes, scalar operand, or trailing 1-D affine."""
    if a.shape == b.shape:
        return
    if a.shape == () or b.shape == ():
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return
    raise ValueError(f"incompatible shapes {a.shape} and {b.shape}; reshape explicitly")


def _reduce_to(g, shape):
    """Sum a gradient down to an operand's shape (scalar / trailing-1D cases)."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # trailing 1-D operand broadcast over leading axes
    lead = tuple(range(g.ndim - 1))
    return g.sum(axis=lead)


def add(a, b):
    _check_binary_shapes(a.data, b.data)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)))


def sub(a, b):
    _check_binary_shapes(a.data, b.data)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)))


def mul(a, b):
    _check_binary_shapes(a.data, b.data)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape)),
    )


def div(a, b):
    _check_binary_shapes(a.data, b.data)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _reduce_to(g / b.data, a.data.shape),
            _reduce_to(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    p = float(p)
    out = a.data**p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    if np.any(a.data <= 0.0):
        raise ValueError("log requires strictly positive input")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a):
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sin(a):
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a):
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def sigmoid(a):
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def maximum(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_binary_shapes(a.data, b.data)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return _make(
        out,
        (a, b),
        lambda g: (
            _reduce_to(g * take_a, a.data.shape),
            _reduce_to(g * ~take_a, b.data.shape),
        ),
    )


def minimum(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_binary_shapes(a.data, b.data)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return _make(
        out,
        (a, b),
        lambda g: (
            _reduce_to(g * take_a, a.data.shape),
            _reduce_to(g * ~take_a, b.data.shape),
        ),
    )


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul needs matching stacked shapes, got {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make(
        out,
        (a, b),
        lambda g: (g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g),
    )


def reshape(a, shape):
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def narrow(a, idx):
    """Basic slicing/integer indexing with gradient (no fancy indexing)."""
    items = idx if isinstance(idx, tuple) else (idx,)
    for it in items:
        if not isinstance(it, (int, np.integer, slice)) and it is not Ellipsis:
            raise ValueError("only basic slicing is differentiable; use index_rows for gather")
    out = a.data[idx]

    def backward(g):
        gx = np.zeros_like(a.data)
        gx[idx] = g
        return (gx,)

    return _make(out, (a,), backward)


def index_rows(a, rows):
    """Gather rows along axis 0 by an integer index array."""
    rows = np.asarray(rows, dtype=np.intp)
    out = a.data[rows]

    def backward(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, rows, g)
        return (gx,)

    return _make(out, (a,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward)


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a, axis=None, keepdims=False):
    axes = _axis_tuple(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk, a.data.shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    axes = _axis_tuple(axis, a.ndim)
    count = math.prod(a.data.shape[ax] for ax in axes)
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk / count, a.data.shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def softmax(x, axis):
    """Max-shifted softmax along one axis; rows sum to 1."""
    if not isinstance(axis, (int, np.integer)) or not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} invalid for shape {x.shape}")
    axis = int(axis) % x.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"gamma/beta must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dbeta = g.sum(axis=lead)
        dgamma = (g * xhat).sum(axis=lead)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), backward)


def multi_head_attention(q, k, v, heads, wq, bq, wk, bk, wv, bv, wo, bo):
    """Projected scaled dot-product attention with per-head softmax.

    q: (M, D); k, v: (N, D). Head outputs are concatenated and passed
    through the output projection. Returns (out, weights) where weights is
    the detached (heads, M, N) attention array.
    """
    m, d = q.shape
    n = k.shape[0]
    if d % heads != 0:
        from .errors import ConfigError

        raise ConfigError(f"model dim {d} not divisible by {heads} heads")
    if k.shape != v.shape:
        raise ValueError("key/value sequence shapes must match")
    dh = d // heads

    def split_heads(t, length):
        return transpose(reshape(t, (length, heads, dh)), (1, 0, 2))

    qh = split_heads(add(matmul(q, wq), bq), m)  # (H, M, dh)
    kh = split_heads(add(matmul(k, wk), bk), n)  # (H, N, dh)
    vh = split_heads(add(matmul(v, wv), bv), n)  # (H, N, dh)
    scores = mul(matmul(qh, transpose(kh, (0, 2, 1))), _wrap(1.0 / math.sqrt(dh)))
    attn = softmax(scores, axis=-1)  # (H, M, N)
    ctx = matmul(attn, vh)  # (H, M, dh)
    merged = reshape(transpose(ctx, (1, 0, 2)), (m, d))
    out = add(matmul(merged, wo), bo)
    return out, attn.data


def grad_check(f, x, h=1e-4):
    """Max relative error between tape gradients and central differences.

    f must be a deterministic scalar-valued function of one Tensor. The
    error at each coordinate is |analytic - numeric| divided by
    max(1, |analytic|, |numeric|).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    with GradTape() as tape:
        y = f(probe)
    if y.data.shape != ():
        raise ValueError("grad_check requires a scalar-valued function")
    if not np.isfinite(y.data):
        raise ValueError("function value is not finite at x")
    tape.backward(y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = probe.data.copy().reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(flat.reshape(probe.data.shape))).item()
        flat[i] = orig - h
        fm = f(Tensor(flat.reshape(probe.data.shape))).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    numeric = numeric.reshape(probe.data.shape)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
