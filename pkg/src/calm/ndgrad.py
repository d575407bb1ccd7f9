"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the classifier needs are provided. Every primitive
checks its output for NaN/Inf and raises :class:`NonFiniteError`.

Cost notes (n = output size unless stated):
    add, mul, exp, log, softplus, sigmoid, silu   O(n)
    matmul (..., m, k) @ (..., k, p)              O(batch * m * k * p)
    contract_last                                 O(size of broadcast input)
    reshape, transpose                            O(1) forward, O(n) backward
    concat, slice, sum, mean                      O(input size)
    selective_scan                                O(N * J * D * S), see kernels.py

Usage::

    with GradTape() as tape:
        loss = (w * x).sum()
    grads = backward(loss, tape)
"""
from __future__ import annotations

import numpy as np

from . import kernels


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN or Inf."""


class ShapeError(ValueError):
    pass


_ACTIVE: list["GradTape"] = []


class GradTape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, so each node's inputs were
    produced by earlier nodes (or are leaves).
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


class _Node:
    __slots__ = ("kind", "inputs", "output", "grad_fn")

    def __init__(self, kind, inputs, output, grad_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_axis(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_axis(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of trailing-aligned broadcast)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _record(kind, inputs, out_arr, grad_fn):
    if not np.isfinite(out_arr).all():
        raise NonFiniteError(f"{kind} produced a non-finite value")
    out = Tensor._wrap(out_arr)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        tape = _ACTIVE[-1]
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(kind, inputs, out, grad_fn))
    return out


def _broadcast_shape(a, b, kind):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a} and {b} do not broadcast") from None


# elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    ad = a.data
    return _record("log", (a,), np.log(ad), lambda g: (g / ad,))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    a = as_tensor(a)
    ad = a.data
    return _record("softplus", (a,), np.logaddexp(0.0, ad), lambda g: (g * _sigmoid(ad),))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def silu(a):
    a = as_tensor(a)
    ad = a.data
    s = _sigmoid(ad)
    return _record("silu", (a,), ad * s, lambda g: (g * (s + ad * s * (1.0 - s)),))


# linear algebra

def matmul(a, b):
    """Batched matrix product with numpy broadcasting of leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} @ {b.shape} differ")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record("matmul", (a, b), ad @ bd, grad_fn)


def contract_last(a, b):
    """sum(a * b, axis=-1) with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "contract_last")
    ad, bd = a.data, b.data
    out = np.sum(ad * bd, axis=-1)

    def grad_fn(g):
        g = g[..., None]
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("contract_last", (a, b), out, grad_fn)


# structural

def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    src = a.shape
    return _record("reshape", (a,), out, lambda g: (g.reshape(src),))


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (a,), np.ascontiguousarray(np.transpose(a.data, axes)),
                   lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    arrs = [t.data for t in tensors]
    try:
        out = np.concatenate(arrs, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [x.shape[axis] for x in arrs])

    def grad_fn(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _record("concat", tuple(tensors), out, grad_fn)


def slice_(a, index):
    """Basic (non-fancy) indexing."""
    a = as_tensor(a)
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not (isinstance(ix, (int, slice)) or ix is Ellipsis or ix is None):
            raise TypeError("slice_ supports ints, slices, Ellipsis and None only")
    out = np.array(a.data[index], copy=True)
    src = a.shape

    def grad_fn(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return _record("slice", (a,), out, grad_fn)


def sum_axis(a, axis=None, keepdims=False):
    a = as_tensor(a)
    src = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record("sum", (a,), np.asarray(out, dtype=np.float64), grad_fn)


def mean_axis(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_axis(a, axis, keepdims), 1.0 / count)


# fused kernels

def selective_scan(u, delta, A, B, C, backend=None):
    """y[n,j,d] = <h_j[n,d,:], C[n,j,:]> for the input-dependent recurrence.

    u, delta: (N, J, D); A: (D, S); B, C: (N, J, S). See ``kernels``.
    """
    u, delta, A, B, C = (as_tensor(t) for t in (u, delta, A, B, C))
    N, J, D = u.shape
    if delta.shape != (N, J, D) or A.shape[0] != D or B.shape != (N, J, A.shape[1]) \
            or C.shape != B.shape:
        raise ShapeError("selective_scan: inconsistent operand shapes")
    arrs = (u.data, delta.data, A.data, B.data, C.data)
    out = kernels.scan_forward(*arrs, backend=backend)
    return _record("selective_scan", (u, delta, A, B, C), out,
                   lambda g: kernels.scan_backward(*arrs, g, backend=backend))


# differentiation

def backward(loss, tape=None, retain_graph=False):
    """Reverse sweep over ``tape``; returns {leaf tensor: gradient array}.

    Sets ``.grad`` on every requires_grad leaf reached from ``loss``. The
    tape is cleared afterwards unless ``retain_graph`` is set, which breaks
    the tensor/tape reference cycle so intermediates are freed promptly.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    tape = tape if tape is not None else loss._tape
    if tape is None or loss._tape is not tape:
        raise ValueError("loss was not recorded on this tape (detached graph)")

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.grad_fn(g)):
            if not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp._tape is None:
                leaves[key] = inp

    result = {}
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g
        result[leaf] = g
    if not retain_graph:
        tape.clear()
    return result


def finite_diff_check(f, params, epsilon=1e-5, max_entries=None, seed=0):
    """Largest |analytic - central difference| / max(1, |analytic|).

    ``f`` takes no arguments and returns a scalar Tensor built from
    ``params``. ``max_entries`` optionally subsamples entries per parameter.
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    first, second = f().item(), f().item()
    if first != second:
        raise ValueError("f is not deterministic")

    with GradTape() as tape:
        loss = f()
    analytic = backward(loss, tape)
    rng = np.random.default_rng(seed)

    worst = 0.0
    for p in params:
        ga = analytic.get(p, np.zeros(p.shape)).reshape(-1)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = f().item()
            flat[i] = orig - epsilon
            down = f().item()
            flat[i] = orig
            fd = (up - down) / (2 * epsilon)
            err = abs(ga[i] - fd) / max(1.0, abs(ga[i]))
            worst = max(worst, err)
    return worst
