import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from anchorvlp.numcore import (
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    _fallback,
    backward,
    cross_entropy_soft,
    embedding_lookup,
    finite_diff_grad,
    gelu,
    kernels,
    layer_norm,
    matmul,
    ops,
    rel_error,
    softmax,
)


def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(n)] for i in range(m)]


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    b = np.random.default_rng(0).normal(size=(2, 2))
    assert np.array_equal(matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_matches_triple_loop():
    a, b = [[1, 2], [3, 4]], [[5, 6], [7, 8]]
    expected = naive_matmul(a, b)
    assert expected == [[19, 22], [43, 50]]
    assert np.array_equal(matmul(Tensor(a), Tensor(b)).data, np.array(expected, dtype=float))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("seed", range(10))
def test_matmul_grad_vs_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    ana = backward(matmul(a, b).sum(), [a, b])
    num = finite_diff_grad(lambda: matmul(a, b).sum(), [a, b])
    assert rel_error(ana[0], num[0]) < 1e-6
    assert rel_error(ana[1], num[1]) < 1e-6


def test_batched_matmul_with_shared_weight_grad():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    f = lambda: (matmul(x, w) * matmul(x, w)).sum()  # noqa: E731
    ana = backward(f(), [x, w])
    num = finite_diff_grad(f, [x, w])
    assert rel_error(ana[0], num[0]) < 1e-7
    assert rel_error(ana[1], num[1]) < 1e-7


# ---------------------------------------------------------------- softmax

def test_softmax_uniform():
    assert np.allclose(softmax(Tensor([2.5, 2.5, 2.5])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_analytic():
    assert np.allclose(softmax(Tensor([0.0, math.log(2)])).data, [1 / 3, 2 / 3], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_and_shift_invariance(x, c):
    y = softmax(Tensor(x)).data
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert np.allclose(softmax(Tensor(x + c)).data, y, atol=1e-12)


def test_softmax_mask_gives_exact_zero():
    x = Tensor([[1.0, 2.0, 3.0], [0.5, -1.0, 9.0]])
    mask = np.array([[True, False, True], [False, True, False]])
    y = softmax(x, mask=mask).data
    assert y[0, 1] == 0.0 and y[1, 0] == 0.0 and y[1, 2] == 0.0
    assert y[1, 1] == 1.0


def test_softmax_other_axis():
    x = np.random.default_rng(3).normal(size=(4, 3))
    assert np.allclose(softmax(Tensor(x), axis=0).data.sum(axis=0), 1.0)


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor(np.full((2, 4), 3.7)), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    assert np.array_equal(out, np.zeros((2, 4)))


def test_layer_norm_moments():
    x = np.random.default_rng(0).normal(3.0, 5.0, size=(6, 16))
    out = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-6)
    assert np.allclose(out.std(axis=-1), 1.0, atol=1e-6)


def test_layer_norm_bad_gamma():
    with pytest.raises(ShapeError):
        layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


# ---------------------------------------------------------------- gelu

def test_gelu_values():
    assert gelu(Tensor(0.0)).item() == 0.0
    assert abs(gelu(Tensor(10.0)).item() - 10.0) < 1e-6
    # x * Phi(x) at 1 via math.erf
    ref = 1.0 * 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
    assert abs(gelu(Tensor(1.0)).item() - ref) < 1e-15
    assert abs(ref - 0.8413447) < 1e-7


# ---------------------------------------------------------------- embedding

def test_embedding_first_row():
    table = Tensor(np.arange(12.0).reshape(4, 3))
    assert np.array_equal(embedding_lookup(table, [0]).data, [[0.0, 1.0, 2.0]])


def test_embedding_repeated_id_accumulates():
    table = Tensor(np.zeros((5, 2)), requires_grad=True)
    out = embedding_lookup(table, [3, 3])
    up = np.array([[1.0, 2.0], [10.0, 20.0]])
    g = backward((out * up).sum(), [table])[0]
    assert np.array_equal(g[3], [11.0, 22.0])
    assert np.array_equal(np.delete(g, 3, axis=0), np.zeros((4, 2)))


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        embedding_lookup(Tensor(np.zeros((3, 2))), [3])


def test_embedding_grad_vs_finite_differences():
    rng = np.random.default_rng(5)
    table = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    ids = np.array([[0, 2, 2], [5, 1, 0]])
    w = rng.normal(size=(2, 3, 3))
    f = lambda: (gelu(embedding_lookup(table, ids)) * w).sum()  # noqa: E731
    assert rel_error(backward(f(), [table])[0], finite_diff_grad(f, [table])[0]) < 1e-7


# ---------------------------------------------------------------- cross entropy

def test_cross_entropy_uniform_is_log_c():
    for c in (2, 5, 64):
        t = np.zeros(c)
        t[1] = 1.0
        assert abs(cross_entropy_soft(Tensor(np.zeros(c)), t).item() - math.log(c)) < 1e-12


def test_cross_entropy_saturation():
    logits = np.zeros(4)
    logits[2] = 1e6
    t = np.zeros(4)
    t[2] = 1.0
    assert cross_entropy_soft(Tensor(logits), t).item() < 1e-12


def test_cross_entropy_soft_targets_direct_evaluation():
    # independent evaluation: sigma = softmax([1, 0]) by hand
    s1 = math.exp(1) / (math.exp(1) + 1)
    s2 = 1 / (math.exp(1) + 1)
    ref = 0.7 * -math.log(s1) + 0.3 * -math.log(s2)
    assert abs(ref - 0.6132617) < 1e-7
    assert abs(cross_entropy_soft(Tensor([1.0, 0.0]), [0.7, 0.3]).item() - ref) < 1e-14


def test_cross_entropy_rows():
    out = cross_entropy_soft(Tensor(np.zeros((3, 4))), np.eye(4)[:3])
    assert out.shape == (3,)
    assert np.allclose(out.data, math.log(4))


# ---------------------------------------------------------------- backward / tape

def test_sum_of_squares_grad():
    x = Tensor([1.0, -2.0, 3.5], requires_grad=True)
    assert np.array_equal(backward((x * x).sum(), [x])[0], 2 * x.data)


def test_disconnected_param_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0], requires_grad=True)
    g = backward((x * x).sum(), {"x": x, "y": y})
    assert np.array_equal(g["y"], [0.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0, [x])


def test_tape_topological_order():
    x = Tensor([1.0, 2.0], requires_grad=True)
    a = x * 2.0
    b = a + x
    loss = (b * a).sum()
    tape = Tape.from_output(loss)
    pos = {n.node_id: i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n.parents:
            if p.requires_grad:
                assert pos[p.node_id] < pos[n.node_id]
    assert len(pos) == len(tape.nodes)  # each node once


def test_tensor_backward_method_accumulates():
    x = Tensor([2.0], requires_grad=True)
    (x * x).sum().backward()
    assert np.array_equal(x.grad, [4.0])


def test_backward_deterministic():
    rng = np.random.default_rng(2)
    w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    x = rng.normal(size=(3, 4))

    def loss():
        h = layer_norm(matmul(Tensor(x), w), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        return softmax(gelu(h)).sum() + (h * h).mean()

    g1 = backward(loss(), [w])[0]
    g2 = backward(loss(), [w])[0]
    assert g1.tobytes() == g2.tobytes()


def test_non_finite_forward_is_error():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])
    with pytest.raises(NumericError):
        ops.exp(Tensor([1000.0]))


def test_ops_do_not_mutate_inputs():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    before = x.data.copy()
    g, b = Tensor(np.ones(4), requires_grad=True), Tensor(np.zeros(4), requires_grad=True)
    loss = (softmax(gelu(layer_norm(x, g, b))) * 3.0).sum()
    backward(loss, [x, g, b])
    assert np.array_equal(x.data, before)


# ---------------------------------------------------------------- finite differences

def test_finite_diff_linear():
    x = Tensor([1.0])
    assert abs(finite_diff_grad(lambda: (x * 3.0).sum(), [x])[0][0] - 3.0) < 1e-9


def test_finite_diff_cubic():
    x = Tensor([2.0])
    assert abs(finite_diff_grad(lambda: (x * x * x).sum(), [x])[0][0] - 12.0) < 1e-7


# ---------------------------------------------------------------- every primitive vs finite differences

def _prim_cases(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    gam = Tensor(rng.normal(size=4), requires_grad=True)
    bet = Tensor(rng.normal(size=4), requires_grad=True)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    mask = rng.random((3, 4)) < 0.6
    mask[:, 0] = True
    r = rng.normal(size=(3, 4))
    targets = rng.uniform(0, 1, size=(3, 4))
    yb = (rng.random((3, 4)) < 0.5).astype(float)
    return {
        "add": (lambda: ((a + b) * r).sum(), [a, b]),
        "sub": (lambda: ((a - b) * r).sum(), [a, b]),
        "mul": (lambda: ((a * b) * r).sum(), [a, b]),
        "div": (lambda: (ops.div(a, pos) * r).sum(), [a, pos]),
        "exp": (lambda: (ops.exp(a) * r).sum(), [a]),
        "log": (lambda: (ops.log(pos) * r).sum(), [pos]),
        "tanh": (lambda: (ops.tanh(a) * r).sum(), [a]),
        "sigmoid": (lambda: (ops.sigmoid(a) * r).sum(), [a]),
        "gelu": (lambda: (gelu(a) * r).sum(), [a]),
        "matmul": (lambda: (matmul(a, w) * r[:, :2]).sum(), [a, w]),
        "transpose": (lambda: (a.transpose() * r.T).sum(), [a]),
        "reshape": (lambda: (a.reshape(4, 3) * r.reshape(4, 3)).sum(), [a]),
        "getitem": (lambda: (a[1:, ::2] * r[1:, ::2]).sum(), [a]),
        "take_rows": (lambda: (ops.take_rows(a, [2, 0, 2]) * r).sum(), [a]),
        "concat": (lambda: (ops.concat([a, b], axis=1) * np.hstack([r, r])).sum(), [a, b]),
        "mean": (lambda: (a.mean(axis=1) * r[:, 0]).sum(), [a]),
        "softmax": (lambda: (softmax(a) * r).sum(), [a]),
        "masked_softmax": (lambda: (softmax(a, mask=mask) * r).sum(), [a]),
        "log_softmax": (lambda: (ops.log_softmax(a) * r).sum(), [a]),
        "layer_norm": (lambda: (layer_norm(a, gam, bet, 1e-5) * r).sum(), [a, gam, bet]),
        "cross_entropy": (lambda: cross_entropy_soft(a, targets).sum(), [a]),
        "bce": (lambda: (ops.bce_with_logits(a, yb) * r).sum(), [a]),
    }


@pytest.mark.parametrize("seed", range(10))
def test_every_primitive_backward_matches_finite_differences(seed):
    cases = _prim_cases(np.random.default_rng(seed))
    for name, (f, params) in cases.items():
        ana = backward(f(), params)
        num = finite_diff_grad(f, params, eps=1e-5)
        for k in ana:
            err = rel_error(ana[k], num[k])
            assert err < 1e-4, f"{name}[{k}] rel err {err}"


# ---------------------------------------------------------------- compiled vs fallback kernels

@pytest.mark.skipif(kernels.BACKEND != "cython", reason="extension not built")
@pytest.mark.parametrize("seed", range(5))
def test_compiled_kernels_agree_with_fallback(seed):
    rng = np.random.default_rng(seed)
    x = np.ascontiguousarray(rng.normal(size=(7, 9)))
    dy = np.ascontiguousarray(rng.normal(size=(7, 9)))
    mask = rng.random((7, 9)) < 0.5
    mask[:, 3] = True
    m8 = np.ascontiguousarray(mask).view(np.uint8)
    np.testing.assert_allclose(kernels.softmax_rows(x, m8), _fallback.softmax_rows(x, m8), atol=1e-14)
    np.testing.assert_allclose(kernels.softmax_rows(x), _fallback.softmax_rows(x), atol=1e-14)
    y = kernels.softmax_rows(x)
    np.testing.assert_allclose(kernels.softmax_rows_backward(y, dy), _fallback.softmax_rows_backward(y, dy), atol=1e-14)
    g, b = rng.normal(size=9), rng.normal(size=9)
    for c, f in zip(kernels.layer_norm_rows(x, g, b, 1e-12), _fallback.layer_norm_rows(x, g, b, 1e-12)):
        np.testing.assert_allclose(c, f, atol=1e-12)
    _, xh, rs = kernels.layer_norm_rows(x, g, b, 1e-12)
    for c, f in zip(kernels.layer_norm_rows_backward(xh, rs, g, dy), _fallback.layer_norm_rows_backward(xh, rs, g, dy)):
        np.testing.assert_allclose(c, f, atol=1e-12)
    np.testing.assert_allclose(kernels.gelu_rows(x), _fallback.gelu_rows(x), atol=1e-15)
    np.testing.assert_allclose(kernels.gelu_rows_backward(x, dy), _fallback.gelu_rows_backward(x, dy), atol=1e-14)
    ids = rng.integers(0, 4, size=7).astype(np.int64)
    t1, t2 = np.zeros((4, 9)), np.zeros((4, 9))
    kernels.scatter_add_rows(t1, ids, dy)
    _fallback.scatter_add_rows(t2, ids, dy)
    np.testing.assert_allclose(t1, t2, atol=1e-14)
