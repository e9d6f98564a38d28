import numpy as np
import pytest

from anchorvlp.corpus import Triple
from anchorvlp.model import (
    Batch,
    CheckpointError,
    ModelConfig,
    ModelWeights,
    answer_logits,
    attention,
    build_mask,
    cls_binary,
    embed_triple,
    encode,
    encoder_forward,
    load_checkpoint,
    mlm_logits,
    save_checkpoint,
)
from anchorvlp.numcore import Tensor, backward, finite_diff_grad, ops, rel_error

from conftest import random_triple, random_weights, tiny_config


def _rows(allow, i):
    return set(np.flatnonzero(allow[i]).tolist())


# ---------------------------------------------------------------- config & weights

def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden=10, num_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=0)
    c = ModelConfig()
    assert (c.max_tokens, c.max_regions) == (35, 50)
    assert ModelConfig.from_record(c.to_record()) == c


def test_parameter_names_unique_and_init(cfg):
    w = ModelWeights.init(cfg, 0)
    assert len(set(w.params)) == len(w.params)
    assert dict((k, p.shape) for k, p in w.items()) == dict(ModelWeights.shapes(cfg))
    assert np.all(w["layers.0.ln1.gamma"].data == 1) and np.all(w["region.bias"].data == 0)
    assert ModelWeights.init(ModelConfig(), 0).num_parameters() == 33994


def test_weights_copy_is_deep(cfg):
    w = ModelWeights.init(cfg, 0)
    c = w.copy()
    c["region.bias"].data += 1
    assert np.all(w["region.bias"].data == 0)


# ---------------------------------------------------------------- embeddings

def test_zero_region_embeds_to_type_row(cfg):
    w = random_weights(cfg, 0)
    w["region.bias"].data[...] = 0
    t = Triple([1, 7, 2], [2], np.zeros((1, 8)))
    x = embed_triple(t, w).data
    assert np.array_equal(x[4], w["embeddings.type"].data[2])


def test_region_permutation_moves_rows(cfg):
    w = random_weights(cfg, 1)
    t = random_triple(np.random.default_rng(0), cfg, n_regions=3)
    perm = [2, 0, 1]
    tp = t.replace(region_vecs=t.region_vecs[perm])
    a, b = embed_triple(t, w).data, embed_triple(tp, w).data
    n = t.num_tokens
    assert np.array_equal(a[:n], b[:n])
    assert np.allclose(a[n:][perm], b[n:], rtol=0, atol=1e-14)


def test_region_projection_gradient(cfg):
    w = random_weights(cfg, 2, std=0.3)
    t = random_triple(np.random.default_rng(1), cfg)
    target = np.random.default_rng(2).normal(size=(t.num_tokens + t.num_regions, cfg.hidden))

    def loss():
        return (embed_triple(t, w) * target).sum()

    g = backward(loss(), {"W": w["region.weight"]})["W"]
    fd = finite_diff_grad(loss, {"W": w["region.weight"]})["W"]
    assert rel_error(g, fd) < 1e-4


def test_embedding_rejects_wrong_region_dim(cfg):
    w = ModelWeights.init(cfg, 0)
    with pytest.raises(ValueError):
        embed_triple(Triple([1, 2], [2], np.zeros((1, 5))), w)


# ---------------------------------------------------------------- masks

def test_full_mask_all_true():
    m = build_mask("full", {"word": range(3), "tag": range(3, 4), "region": range(4, 5)})
    assert m.allow.shape == (5, 5) and m.allow.all()


def test_seq2seq_mask_rule():
    m = build_mask("seq2seq", {"word": [0, 1, 2], "tag": [3], "region": [4]}).allow
    assert _rows(m, 1) == {0, 1, 3, 4}
    assert _rows(m, 3) == {3, 4}
    assert _rows(m, 4) == {3, 4}
    assert _rows(m, 0) == {0, 3, 4}


def test_partial_w_v_mask():
    m = build_mask("w-v", {"word": [0, 1], "tag": [2], "region": [3]}).allow
    assert _rows(m, 0) == {0, 1, 3}
    assert _rows(m, 2) == {2}
    assert _rows(m, 3) == {0, 1, 3}


def test_partial_v_q_mask():
    m = build_mask("partial", {"word": [0, 1], "tag": [2], "region": [3]}, pairs="v-q").allow
    assert _rows(m, 0) == {0}
    assert _rows(m, 2) == {2, 3}
    assert _rows(m, 3) == {2, 3}


def test_mask_padding_and_diagonal():
    m = build_mask("full", {"word": [0, 1], "tag": [], "region": [3]}, seq_len=5).allow
    assert m.diagonal().all()
    assert _rows(m, 2) == {2} and _rows(m, 4) == {4}
    assert not m[0, 2] and not m[3, 4]


def test_unknown_mask_kind():
    with pytest.raises(ValueError):
        build_mask("diagonal", {"word": [0]})
    with pytest.raises(ValueError):
        build_mask("w-x", {"word": [0]})


# ---------------------------------------------------------------- attention & encoder

def test_single_position_attention_is_projected_value(cfg):
    w = random_weights(cfg, 3)
    x = Tensor(np.random.default_rng(0).normal(size=(1, cfg.hidden)))
    out = attention(x, np.ones((1, 1), bool), w, 0).data
    p = "layers.0.attn."
    v = x.data @ w[p + "v.weight"].data + w[p + "v.bias"].data
    expected = v @ w[p + "o.weight"].data + w[p + "o.bias"].data
    assert np.allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_identical_rows_give_identical_outputs(cfg):
    w = random_weights(cfg, 4)
    row = np.random.default_rng(1).normal(size=cfg.hidden)
    out = attention(Tensor(np.stack([row, row])), np.ones((2, 2), bool), w, 0).data
    assert np.array_equal(out[0], out[1])


def test_attention_masked_independence(cfg):
    rng = np.random.default_rng(5)
    w = random_weights(cfg, 5)
    s = 7
    for _ in range(10):
        allow = rng.random((s, s)) < 0.5
        np.fill_diagonal(allow, True)
        x = rng.normal(size=(s, cfg.hidden))
        base = attention(Tensor(x), allow, w, 1).data
        j = int(rng.integers(s))
        x2 = x.copy()
        x2[j] += rng.normal(size=cfg.hidden)
        delta = np.abs(attention(Tensor(x2), allow, w, 1).data - base).max(axis=1)
        for i in range(s):
            if not allow[i, j]:
                assert delta[i] < 1e-12
            elif i == j:
                assert delta[i] > 1e-6


def test_empty_stack_is_identity():
    c = tiny_config(num_layers=0)
    w = ModelWeights.init(c, 0)
    x = Tensor(np.random.default_rng(0).normal(size=(4, c.hidden)))
    assert np.array_equal(encoder_forward(x, np.ones((4, 4), bool), w).data, x.data)


def test_encoder_deterministic(cfg):
    w = random_weights(cfg, 6)
    t = random_triple(np.random.default_rng(0), cfg)
    a, _ = encode(w, [t])
    b, _ = encode(w, [t])
    assert a.data.tobytes() == b.data.tobytes()


def test_seq2seq_image_side_ignores_caption(cfg):
    w = random_weights(cfg, 7)
    rng = np.random.default_rng(7)
    t = random_triple(rng, cfg, n_words=4)
    base, _ = encode(w, [t], "seq2seq")
    for pos in range(len(t.word_ids)):
        ids = list(t.word_ids)
        ids[pos] = (ids[pos] + 3) % cfg.vocab_size
        h, _ = encode(w, [t.replace(word_ids=ids)], "seq2seq")
        img = slice(len(t.word_ids), t.num_tokens + t.num_regions)
        assert np.abs(h.data[0, img] - base.data[0, img]).max() < 1e-10


def test_padded_batch_matches_single(cfg):
    w = random_weights(cfg, 8)
    rng = np.random.default_rng(8)
    ts = [random_triple(rng, cfg, n_words=k, n_tags=k % 3, n_regions=1 + k % 4) for k in range(1, 5)]
    for kind in ("full", "seq2seq", "w-v"):
        hb, batch = encode(w, ts, kind)
        for b, t in enumerate(ts):
            hs, _ = encode(w, [t], kind)
            lay = batch.layouts[b]
            rows = np.concatenate([lay["word"], lay["tag"], lay["region"]])
            assert np.allclose(hb.data[b, rows], hs.data[0], rtol=0, atol=1e-10)


def test_region_permutation_equivariance_full_mask(cfg):
    w = random_weights(cfg, 9)
    t = random_triple(np.random.default_rng(9), cfg, n_regions=4)
    perm = [3, 1, 0, 2]
    h, _ = encode(w, [t])
    hp, _ = encode(w, [t.replace(region_vecs=t.region_vecs[perm])])
    n = t.num_tokens
    assert np.allclose(h.data[0, :n], hp.data[0, :n], atol=1e-10)
    assert np.allclose(h.data[0, n:][perm], hp.data[0, n:], atol=1e-10)


def test_batch_limits(cfg):
    t = random_triple(np.random.default_rng(0), cfg, n_words=cfg.max_tokens)
    with pytest.raises(ValueError):
        Batch.from_triples([t], cfg)


# ---------------------------------------------------------------- heads

def test_zero_hidden_zero_logits(cfg):
    w = random_weights(cfg, 10)
    w["heads.mlm.bias"].data[...] = 0
    logits = mlm_logits(w, Tensor(np.zeros((3, cfg.hidden))), [0, 1]).data
    assert np.array_equal(logits, np.zeros((2, cfg.vocab_size)))
    p = ops.softmax(Tensor(logits)).data
    assert np.allclose(p, 1.0 / cfg.vocab_size)


def test_identical_rows_identical_logits(cfg):
    w = random_weights(cfg, 11)
    row = np.random.default_rng(0).normal(size=cfg.hidden)
    logits = mlm_logits(w, Tensor(np.stack([row, row, row])), [0, 2]).data
    assert np.array_equal(logits[0], logits[1])


def test_mlm_position_in_region_raises(cfg):
    w = ModelWeights.init(cfg, 0)
    with pytest.raises(ValueError):
        mlm_logits(w, Tensor(np.zeros((6, cfg.hidden))), [5], num_tokens=4)


def test_masked_prediction_reaches_context_embedding(cfg):
    w = random_weights(cfg, 12)
    t = Triple([1, 9, 3, 2], [11, 2], np.random.default_rng(0).normal(size=(2, 8)))
    h, _ = encode(w, [t])
    logits = mlm_logits(w, h[0], [2])
    loss = ops.log_softmax(logits)[0, 9] * -1.0
    g = backward(loss, {"emb": w["embeddings.word"]})["emb"]
    assert np.abs(g[11]).sum() > 0  # unmasked tag token used as context
    assert np.abs(g[20]).sum() == 0  # absent token


def test_cls_binary_zero_and_linear(cfg):
    w = ModelWeights.init(cfg, 0)
    w["heads.cls.weight"].data[...] = 0
    h = Tensor(np.random.default_rng(0).normal(size=(3, cfg.hidden)))
    assert cls_binary(w, h).item() == 0.0
    w = random_weights(cfg, 13)
    w["heads.cls.bias"].data[...] = 0
    z = cls_binary(w, h).item()
    assert cls_binary(w, Tensor(h.data * 2.5)).item() == pytest.approx(2.5 * z, rel=1e-12)


def test_answer_logits_zero_and_shift(cfg):
    w = ModelWeights.init(cfg, 0)
    w["heads.answer.weight"].data[...] = 0
    h = Tensor(np.random.default_rng(1).normal(size=(2, 3, cfg.hidden)))
    z = answer_logits(w, h).data
    assert np.allclose(ops.softmax(Tensor(z)).data, 1.0 / cfg.num_answers)
    w = random_weights(cfg, 14)
    z = answer_logits(w, h).data
    assert (np.argmax(z, -1) == np.argmax(z + 7.0, -1)).all()


@pytest.mark.parametrize("head", ["cls", "answer"])
def test_head_gradients(cfg, head):
    w = random_weights(cfg, 15, std=0.3)
    t = random_triple(np.random.default_rng(2), cfg)
    names = ["heads.cls.weight", "layers.1.ffn.out.weight"] if head == "cls" else ["heads.answer.weight", "region.weight"]
    params = {n: w[n] for n in names}
    coef = np.random.default_rng(3).normal(size=cfg.num_answers)

    def loss():
        h, _ = encode(w, [t])
        return cls_binary(w, h[0]) * 1.0 if head == "cls" else (answer_logits(w, h[0]) * coef).sum()

    g = backward(loss(), params)
    fd = finite_diff_grad(loss, params)
    for n in names:
        assert rel_error(g[n], fd[n]) < 1e-4


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip(cfg, tmp_path):
    w = random_weights(cfg, 16)
    ts = [random_triple(np.random.default_rng(s), cfg) for s in range(3)]
    save_checkpoint(w, tmp_path / "m.ck")
    back = load_checkpoint(tmp_path / "m.ck")
    assert back.config == cfg and list(back.params) == list(w.params)
    for k in w.params:
        assert np.array_equal(back[k].data, w[k].data.astype(np.float32).astype(np.float64))
    a, _ = encode(w, ts)
    b, _ = encode(back, ts)
    assert rel_error(a.data, b.data) < 1e-6


@pytest.mark.parametrize("damage", ["magic", "version", "truncate"])
def test_checkpoint_corruption(cfg, tmp_path, damage):
    p = tmp_path / "m.ck"
    save_checkpoint(ModelWeights.init(cfg, 0), p)
    buf = bytearray(p.read_bytes())
    if damage == "magic":
        buf[0:4] = b"NOPE"
    elif damage == "version":
        buf[4] = 7
    else:
        buf = buf[: len(buf) // 2]
    p.write_bytes(bytes(buf))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_checkpoint_shape_mismatch(cfg, tmp_path):
    w = ModelWeights.init(cfg, 0)
    w.params["region.bias"] = Tensor(np.zeros(3), requires_grad=True)
    save_checkpoint(w, tmp_path / "m.ck")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ck")
