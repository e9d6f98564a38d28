"""Pure-numpy versions of the compiled row kernels (same signatures)."""
from __future__ import annotations

import numpy as np
from scipy.special import erf

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def softmax_rows(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is not None:
        # additive large-negative masking; exp underflows to exactly 0
        x = np.where(mask.astype(bool), x, x - 1e9)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return y * (dy - (y * dy).sum(axis=1, keepdims=True))


def layer_norm_rows(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_rows_backward(xhat, rstd, gamma, dy):
    g = dy * gamma
    s1 = g.mean(axis=1, keepdims=True)
    s2 = (g * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (g - s1 - xhat * s2)
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def gelu_rows(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_rows_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    return dy * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x))


def scatter_add_rows(table_grad: np.ndarray, ids: np.ndarray, rows_grad: np.ndarray) -> None:
    np.add.at(table_grad, ids, rows_grad)
