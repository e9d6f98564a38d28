"""AdamW with decoupled weight decay, global-norm clipping, linear schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..numcore import Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def no_decay(name: str) -> bool:
    """Biases and norm parameters are conventionally exempt from weight decay."""
    return name.endswith("bias") or name.endswith("gamma") or name.endswith("beta")


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState,
               lr: float | None = None, decay_filter=None) -> None:
    """One in-place AdamW update.

    The decay term ``p -= lr * wd * p`` is applied separately from the
    bias-corrected Adam step, never folded into the gradient.
    """
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        data = p.data
        if state.weight_decay and not (decay_filter is not None and decay_filter(name)):
            data *= 1.0 - lr * state.weight_decay
        data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= s
    return total


def lr_schedule(step: int, total: int, base_lr: float, warmup: int = 0) -> float:
    """Linear warmup to ``base_lr`` over ``warmup`` steps, then linear decay to 0 at ``total``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    if total == warmup:
        return base_lr
    return base_lr * (total - step) / (total - warmup)
