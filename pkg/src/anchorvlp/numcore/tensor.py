"""Tensor value type and the reverse-mode tape."""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class NumericError(FloatingPointError):
    """A forward value became NaN or Inf."""


class ShapeError(ValueError):
    pass


_state = threading.local()
_node_ids = itertools.count()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread (eval, finite differences)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense float64 array that can participate in the gradient tape.

    Tensors are treated as immutable values: ops never write into an input's
    ``data`` buffer. Only ``grad`` is mutable, and only for leaves.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "node_id", "name", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, *, _check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if _check and not np.isfinite(arr).all():
            raise NumericError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.node_id = next(_node_ids)
        self.name = name
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar, defined in ops to avoid a cycle
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.mul(self, 1.0 / other) if np.isscalar(other) else ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        tape = Tape.from_output(self)
        grads = tape.run(self)
        for node in tape.leaves:
            g = grads.get(node.node_id)
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g if node.grad is None else node.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap an op result; records graph edges only when some parent needs grad."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    out.op = op
    return out


class Tape:
    """Topologically ordered record of the operations that produced an output.

    The tape is rebuilt from graph edges for each backward pass, so there is
    no cached graph to invalidate between forward passes.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes  # inputs precede the ops that consume them

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))
        return cls(order)

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.backward_fn is None and n.requires_grad]

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, output: Tensor, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Reverse sweep; returns node_id -> gradient for every visited node."""
        if seed is None:
            if output.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {output.shape}")
            seed = np.ones_like(output.data)
        grads: dict[int, np.ndarray] = {output.node_id: seed}
        for node in reversed(self.nodes):
            g = grads.get(node.node_id)
            if g is None or node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(p.node_id)
                grads[p.node_id] = pg if prev is None else prev + pg
        return grads


def backward(loss: Tensor, params: Iterable[Tensor] | dict[str, Tensor]) -> dict:
    """Gradients of a scalar ``loss`` for ``params``.

    Parameters the loss does not depend on get an all-zero gradient. Returns a
    dict keyed like ``params`` (names for a mapping, positions for a sequence).
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    items = params.items() if isinstance(params, dict) else enumerate(params)
    if not loss.requires_grad:
        return {k: np.zeros_like(p.data) for k, p in items}
    tape = Tape.from_output(loss)
    grads = tape.run(loss)
    out = {}
    for k, p in items:
        g = grads.get(p.node_id)
        out[k] = np.zeros_like(p.data) if g is None else g
    return out
