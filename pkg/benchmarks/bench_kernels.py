"""Compiled row kernels vs the numpy fallback.

Times each kernel on desk-scale shapes, checks the two backends agree, then
times one pre-training step (forward + backward) under each backend in a
fresh interpreter.

    python3 benchmarks/bench_kernels.py [--repeat 200]
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from anchorvlp.numcore import _fallback

try:
    from anchorvlp.numcore import _kernels
except ImportError:
    _kernels = None

# batch 32 x 50 positions, hidden 32; attention rows 32 x 2 heads x 50
ROWS, H, S, V = 32 * 50, 32, 50, 60


def _cases(rng):
    x = rng.normal(size=(ROWS, H))
    att = rng.normal(size=(32 * 2 * S, S))
    mask = (rng.random(att.shape) < 0.8).astype(np.uint8)
    mask[:, 0] = 1
    y = _fallback.softmax_rows(att, mask)
    gamma, beta = rng.normal(size=H), rng.normal(size=H)
    _, xhat, rstd = _fallback.layer_norm_rows(x, gamma, beta, 1e-12)
    ff = rng.normal(size=(ROWS, 4 * H))
    ids = rng.integers(0, V, size=ROWS)
    return {
        "softmax_rows": lambda k: k.softmax_rows(att, mask),
        "softmax_rows_backward": lambda k: k.softmax_rows_backward(y, att),
        "layer_norm_rows": lambda k: k.layer_norm_rows(x, gamma, beta, 1e-12),
        "layer_norm_rows_backward": lambda k: k.layer_norm_rows_backward(xhat, rstd, gamma, x),
        "gelu_rows": lambda k: k.gelu_rows(ff),
        "gelu_rows_backward": lambda k: k.gelu_rows_backward(ff, ff),
        "scatter_add_rows": lambda k: k.scatter_add_rows(np.zeros((V, H)), ids, x),
    }


def _max_diff(a, b) -> float:
    if a is None:
        return 0.0
    if isinstance(a, tuple):
        return max(_max_diff(p, q) for p, q in zip(a, b))
    return float(np.abs(np.asarray(a) - np.asarray(b)).max())


STEP_SCRIPT = """
import time, numpy as np
from anchorvlp.harness.config import RunConfig
from anchorvlp.harness.train import load_data, initial_weights, pretrain_items
from anchorvlp.numcore import backward
from anchorvlp.numcore.kernels import BACKEND
from anchorvlp.objectives import pretrain_forward
cfg = RunConfig(seed=0, corpus_size=256, eval_size=8)
data = load_data(cfg)
w = initial_weights(cfg, data)
rng = np.random.default_rng(0)
items = pretrain_items(data.train, rng, cfg, range(32), w.config.vocab_size)
best = float("inf")
for _ in range({reps}):
    t = time.perf_counter()
    backward(pretrain_forward(w, items).total, w.params)
    best = min(best, time.perf_counter() - t)
print(BACKEND, best)
"""


def _step_time(pure: bool, reps: int) -> tuple[str, float]:
    env = dict(os.environ)
    env.pop("ANCHORVLP_PURE_PYTHON", None)
    if pure:
        env["ANCHORVLP_PURE_PYTHON"] = "1"
    out = subprocess.run([sys.executable, "-c", STEP_SCRIPT.format(reps=reps)], env=env, check=True,
                         capture_output=True, text=True).stdout.split()
    return out[0], float(out[1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200, help="timing repeats per kernel")
    ap.add_argument("--step-repeat", type=int, default=5, help="timed pre-training steps per backend")
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, fn in _cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeat)) * 1e6
        t_cy = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat)) * 1e6
        diff = _max_diff(fn(_fallback), fn(_kernels))
        print(f"{name:28s} {t_py:10.1f} {t_cy:10.1f} {t_py / t_cy:8.2f} {diff:11.1e}")
    print()
    for pure in (True, False):
        backend, secs = _step_time(pure, args.step_repeat)
        print(f"pre-training step (batch 32, H 32, L 2), {backend:6s} backend: {secs * 1e3:8.1f} ms")
    return 0


if __name__ == "__main__":
    sys.exit(main())
