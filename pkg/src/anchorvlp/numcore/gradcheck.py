"""Central finite-difference gradient oracle."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, no_grad


def finite_diff_grad(f: Callable[[], float | Tensor], params: Iterable[Tensor] | dict[str, Tensor],
                     eps: float = 1e-5, indices: dict | None = None) -> dict:
    """Numerical gradient of ``f`` w.r.t. each tensor in ``params``.

    ``f`` takes no arguments and reads the parameters' current values; each
    coordinate is nudged in place by +/-eps and restored afterwards. Optional
    ``indices`` maps a param key to the flat coordinates to probe (others are
    left as NaN).
    """
    items = list(params.items()) if isinstance(params, dict) else list(enumerate(params))
    out = {}
    with no_grad():
        for key, p in items:
            flat = p.data.reshape(-1)
            g = np.full(flat.shape, np.nan) if indices and key in indices else np.zeros(flat.shape)
            coords = indices[key] if indices and key in indices else range(flat.size)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = _scalar(f())
                flat[i] = orig - eps
                fm = _scalar(f())
                flat[i] = orig
                g[i] = (fp - fm) / (2.0 * eps)
            out[key] = g.reshape(p.shape)
    return out


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ||a-b|| / max(||a||, ||b||); 0 when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
