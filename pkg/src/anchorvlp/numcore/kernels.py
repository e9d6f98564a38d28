"""Row-kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``ANCHORVLP_PURE_PYTHON=1`` to force the numpy fallback.
"""
from __future__ import annotations

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("ANCHORVLP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

softmax_rows = _impl.softmax_rows
softmax_rows_backward = _impl.softmax_rows_backward
layer_norm_rows = _impl.layer_norm_rows
layer_norm_rows_backward = _impl.layer_norm_rows_backward
gelu_rows = _impl.gelu_rows
gelu_rows_backward = _impl.gelu_rows_backward
scatter_add_rows = _impl.scatter_add_rows

__all__ = [
    "BACKEND",
    "softmax_rows",
    "softmax_rows_backward",
    "layer_norm_rows",
    "layer_norm_rows_backward",
    "gelu_rows",
    "gelu_rows_backward",
    "scatter_add_rows",
]
