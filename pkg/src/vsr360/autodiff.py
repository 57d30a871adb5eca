"""Minimal reverse-mode autodiff over dense numpy tensors.

A Tensor wraps a numpy array plus an optional gradient buffer.  Operations
executed while a Tape is active record one node per produced tensor; replaying
the nodes in reverse creation order propagates gradients from a scalar loss
back to every leaf with ``requires_grad``.

Only straight-line tapes are supported: one tape per training step, discarded
after backward.  Broadcasting is restricted to singleton extents (plus leading
singleton insertion), which is all the network needs.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """Dense n-d array with an optional gradient buffer."""

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the real work lives in the module-level ops
    def __add__(self, other):
        return elementwise(self, _as_tensor(other, self.dtype), "add")

    def __sub__(self, other):
        return elementwise(self, _as_tensor(other, self.dtype), "sub")

    def __mul__(self, other):
        return elementwise(self, _as_tensor(other, self.dtype), "mul")

    __radd__ = __add__
    __rmul__ = __mul__


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Ordered record of produced tensors and their backward rules.

    Usage::

        with Tape() as tape:
            loss = ...
        backward(tape, loss)
    """

    def __init__(self):
        self.nodes = []          # (out, inputs, backward_fn)
        self._produced = set()   # ids of tensors created on this tape

    def record(self, out, inputs, backward_fn):
        self.nodes.append((out, tuple(inputs), backward_fn))
        self._produced.add(id(out))

    def produced(self, t):
        return id(t) in self._produced

    def __enter__(self):
        _push_tape(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _pop_tape(self)
        return False


_TAPE_STACK = []


def _push_tape(tape):
    _TAPE_STACK.append(tape)


def _pop_tape(tape):
    assert _TAPE_STACK and _TAPE_STACK[-1] is tape
    _TAPE_STACK.pop()


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(out, inputs, backward_fn):
    """Record a node if a tape is active and any input requires grad.

    Marks the output ``requires_grad`` so downstream ops keep recording.
    """
    tape = active_tape()
    if tape is None:
        return out
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def backward(tape, loss):
    """Populate gradients of ``loss`` w.r.t. every requires_grad tensor on the tape.

    Gradients accumulate additively into pre-existing ``grad`` buffers, so call
    ``zero_grad`` on parameters between steps.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValueError("loss tensor was not produced on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    for out, inputs, backward_fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = backward_fn(g)
        for t, ig in zip(inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            if tape.produced(t):
                if id(t) in grads:
                    grads[id(t)] += ig
                else:
                    grads[id(t)] = ig
            else:
                t.accumulate_grad(ig)


def _broadcast_shapes(sa, sb):
    rank = max(len(sa), len(sb))
    sa = (1,) * (rank - len(sa)) + tuple(sa)
    sb = (1,) * (rank - len(sb)) + tuple(sb)
    out = []
    for a, b in zip(sa, sb):
        if a == b or a == 1 or b == 1:
            out.append(max(a, b))
        else:
            raise ValueError(f"shapes {sa} and {sb} are not broadcast-compatible")
    return tuple(out)


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of singleton broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, ext in enumerate(shape):
        if ext == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def elementwise(a, b, kind):
    """Broadcasting add / sub / mul."""
    _broadcast_shapes(a.shape, b.shape)  # raises on incompatibility
    if kind == "add":
        out = Tensor(a.data + b.data)

        def bwd(g):
            return unbroadcast(g, a.shape), unbroadcast(g, b.shape)
    elif kind == "sub":
        out = Tensor(a.data - b.data)

        def bwd(g):
            return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)
    elif kind == "mul":
        out = Tensor(a.data * b.data)

        def bwd(g):
            return (unbroadcast(g * b.data, a.shape),
                    unbroadcast(g * a.data, b.shape))
    else:
        raise ValueError(f"unknown elementwise kind: {kind}")
    return record_op(out, (a, b), bwd)


def scale(a, c):
    """Multiply by a python scalar."""
    c = float(c)
    out = Tensor(a.data * c)
    return record_op(out, (a,), lambda g: (g * c,))


def reduce(a, kind, axes=None, keepdims=False):
    """sum / mean over ``axes`` (None = all)."""
    if axes is not None:
        axes = tuple(int(ax) for ax in (axes if isinstance(axes, (tuple, list)) else (axes,)))
        for ax in axes:
            if not -a.data.ndim <= ax < a.data.ndim:
                raise ValueError(f"axis {ax} out of range for rank {a.data.ndim}")
    if kind == "sum":
        out_data = a.data.sum(axis=axes, keepdims=keepdims)
        denom = 1.0
    elif kind == "mean":
        out_data = a.data.mean(axis=axes, keepdims=keepdims)
        if axes is None:
            denom = a.data.size
        else:
            denom = 1
            for ax in axes:
                denom *= a.data.shape[ax]
    else:
        raise ValueError(f"unknown reduce kind: {kind}")
    out = Tensor(out_data)
    in_shape = a.shape
    reduced_axes = tuple(range(a.data.ndim)) if axes is None else tuple(ax % a.data.ndim for ax in axes)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, reduced_axes) if reduced_axes else g
        g = np.broadcast_to(g, in_shape).astype(a.dtype) / denom
        return (np.ascontiguousarray(g),)

    return record_op(out, (a,), bwd)


def tsum(a, axes=None, keepdims=False):
    return reduce(a, "sum", axes, keepdims)


def tmean(a, axes=None, keepdims=False):
    return reduce(a, "mean", axes, keepdims)


def finite_difference_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar-valued ``f`` at ``x``, element by element.

    The independent oracle for every backward rule in this package; it never
    touches the tape.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.data = np.ascontiguousarray(x.data)
    base = x.data.copy()
    grad = np.zeros_like(base, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = _scalar(f(x))
        flat[k] = orig - eps
        fm = _scalar(f(x))
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * eps)
    x.data = base
    return Tensor(grad, dtype=np.float64)


def _scalar(v):
    if isinstance(v, Tensor):
        return float(v.data.reshape(()))
    return float(v)
