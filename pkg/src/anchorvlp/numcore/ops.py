"""Differentiable primitives.

Each op computes its forward value with numpy (or a row kernel) and attaches
a closure that maps the output gradient to one gradient per input.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, as_tensor, make_node


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b),
                     lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_node(out, (a, b),
                     lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)), "div")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if (xd <= 0).any():
        raise ValueError("log of non-positive value")
    return make_node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # branch-free stable form
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact erf-based normal CDF."""
    xd = x.data
    flat = np.ascontiguousarray(xd.reshape(-1, xd.shape[-1] if xd.ndim else 1))
    out = kernels.gelu_rows(flat).reshape(xd.shape)

    def bw(g):
        dg = np.ascontiguousarray(g.reshape(flat.shape))
        return (kernels.gelu_rows_backward(flat, dg).reshape(xd.shape),)

    return make_node(out, (x,), bw, "gelu")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bw(g):
        if bd.ndim == 2 and ad.ndim > 2:
            # shared weight: fold batch dims into rows
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_node(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------- shape

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return make_node(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def bw(g):
        out = np.zeros(shape)
        if basic:  # no repeated targets
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return make_node(x.data[idx], (x,), bw, "getitem")


def take_rows(x: Tensor, rows) -> Tensor:
    """Gather rows of a 2-D tensor (``x[rows]``) with scatter-add backward."""
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError("take_rows needs a 2-D tensor")
    if rows.size and (rows.min() < 0 or rows.max() >= xd.shape[0]):
        raise IndexError(f"row index out of range [0, {xd.shape[0]})")

    def bw(g):
        out = np.zeros_like(xd)
        kernels.scatter_add_rows(out, rows.reshape(-1), _rows(g))
        return (out,)

    return make_node(xd[rows], (x,), bw, "take_rows")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                     lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return make_node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors),
                     lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- normalization

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilized softmax; entries with ``mask == False`` get probability 0.

    Every row must keep at least one allowed entry.
    """
    xd = x.data
    axis = axis % xd.ndim
    moved = np.moveaxis(xd, axis, -1)
    m = None
    if mask is not None:
        m = np.moveaxis(np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape), axis, -1)
        m = np.ascontiguousarray(m.reshape(-1, m.shape[-1])).view(np.uint8)
    y = kernels.softmax_rows(_rows(moved), m).reshape(moved.shape)
    out = np.moveaxis(y, -1, axis)

    def bw(g):
        gm = np.moveaxis(g, axis, -1)
        dx = kernels.softmax_rows_backward(_rows(y), _rows(gm)).reshape(moved.shape)
        return (np.moveaxis(dx, -1, axis),)

    return make_node(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return make_node(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    xd = x.data
    n = xd.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"gamma/beta must have shape ({n},)")
    out, xhat, rstd = kernels.layer_norm_rows(_rows(xd), gamma.data, beta.data, eps)

    def bw(g):
        dx, dg, db = kernels.layer_norm_rows_backward(xhat, rstd, gamma.data, _rows(g))
        return dx.reshape(xd.shape), dg, db

    return make_node(out.reshape(xd.shape), (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------- lookup & losses

def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; ``ids`` may have any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"embedding id out of range [0, {v})")
    flat = take_rows(table, ids.reshape(-1))
    return reshape(flat, ids.shape + (table.shape[1],)) if ids.ndim != 1 else flat


def cross_entropy_soft(logits: Tensor, targets) -> Tensor:
    """-sum(targets * log_softmax(logits)) over the last axis.

    Returns a scalar for 1-D logits, otherwise one loss per leading row.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"targets shape {t.shape} != logits shape {logits.shape}")
    if not np.isfinite(t).all() or (t < 0).any():
        raise ValueError("targets must be finite and non-negative")
    return mul(sum(mul(log_softmax(logits, axis=-1), t), axis=-1), -1.0)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise -[y log sigmoid(z) + (1-y) log(1 - sigmoid(z))], overflow-safe."""
    y = np.asarray(targets, dtype=np.float64)
    z = logits.data
    if y.shape != z.shape:
        y = np.broadcast_to(y, z.shape)
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return make_node(out, (logits,), lambda g: (g * (_sigmoid(z) - y),), "bce_with_logits")
