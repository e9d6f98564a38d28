"""Triple embedding, attention masks, transformer encoder and output heads."""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Triple
from .numcore import Tensor, ops
from .numcore.ops import embedding_lookup, gelu, layer_norm, matmul, softmax

WORD, TAG, REGION = 0, 1, 2
SEGMENTS = ("word", "tag", "region")
_SHORT = {"w": "word", "q": "tag", "v": "region"}


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 32
    num_layers: int = 2
    num_heads: int = 2
    vocab_size: int = 64
    region_dim: int = 16
    box_dim: int = 6
    max_tokens: int = 35
    max_regions: int = 50
    ffn_mult: int = 4
    type_vocab: int = 3
    num_answers: int = 8
    init_std: float = 0.02
    ln_eps: float = 1e-12

    def __post_init__(self):
        dims = (self.hidden, self.num_heads, self.vocab_size, self.region_dim, self.box_dim,
                self.max_tokens, self.max_regions, self.ffn_mult, self.num_answers)
        if min(dims) <= 0 or self.num_layers < 0:
            raise ValueError("model dimensions must be positive")
        if self.hidden % self.num_heads:
            raise ValueError("hidden must be divisible by num_heads")
        if self.type_vocab != 3:
            raise ValueError("type_vocab is fixed at 3 (word/tag/region)")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.num_heads

    def to_record(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_record(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            k, v = line.split("=", 1)
            if k not in types:
                raise ValueError(f"unknown config key {k!r}")
            kw[k] = float(v) if types[k] in (float, "float") else int(v)
        return cls(**kw)


class ModelWeights:
    """Named parameter tensors; the name -> shape map is the checkpoint contract."""

    def __init__(self, config: ModelConfig, params: Mapping[str, Tensor]):
        self.config = config
        self.params: OrderedDict[str, Tensor] = OrderedDict(params)

    @staticmethod
    def shapes(config: ModelConfig) -> OrderedDict[str, tuple[int, ...]]:
        h, v = config.hidden, config.vocab_size
        f = h * config.ffn_mult
        s: OrderedDict[str, tuple[int, ...]] = OrderedDict()
        s["embeddings.word"] = (v, h)
        s["embeddings.position"] = (config.max_tokens, h)
        s["embeddings.type"] = (config.type_vocab, h)
        s["region.weight"] = (config.region_dim + config.box_dim, h)
        s["region.bias"] = (h,)
        for i in range(config.num_layers):
            p = f"layers.{i}."
            s[p + "ln1.gamma"] = (h,)
            s[p + "ln1.beta"] = (h,)
            for m in ("q", "k", "v", "o"):
                s[p + f"attn.{m}.weight"] = (h, h)
                s[p + f"attn.{m}.bias"] = (h,)
            s[p + "ln2.gamma"] = (h,)
            s[p + "ln2.beta"] = (h,)
            s[p + "ffn.in.weight"] = (h, f)
            s[p + "ffn.in.bias"] = (f,)
            s[p + "ffn.out.weight"] = (f, h)
            s[p + "ffn.out.bias"] = (h,)
        s["final_ln.gamma"] = (h,)
        s["final_ln.beta"] = (h,)
        s["heads.mlm.weight"] = (h, v)
        s["heads.mlm.bias"] = (v,)
        s["heads.cls.weight"] = (h, 1)
        s["heads.cls.bias"] = (1,)
        s["heads.answer.weight"] = (h, config.num_answers)
        s["heads.answer.bias"] = (config.num_answers,)
        s["heads.nlvr.fc1.weight"] = (2 * h, h)
        s["heads.nlvr.fc1.bias"] = (h,)
        s["heads.nlvr.fc2.weight"] = (h, 1)
        s["heads.nlvr.fc2.bias"] = (1,)
        return s

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelWeights":
        rng = np.random.default_rng(seed)
        params = OrderedDict()
        for name, shape in cls.shapes(config).items():
            if name.endswith("gamma"):
                data = np.ones(shape)
            elif name.endswith("bias") or name.endswith("beta"):
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, config.init_std, size=shape)
            params[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_heads(self) -> "ModelWeights":
        """Zero every output head in place (chance-level predictions)."""
        for name, p in self.params.items():
            if name.startswith("heads."):
                p.data[...] = 0.0
        return self

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, OrderedDict(
            (k, Tensor(p.data.copy(), requires_grad=True, name=k)) for k, p in self.params.items()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}


# ---------------------------------------------------------------- batching & embedding

@dataclass
class Batch:
    """Padded batch. Tokens occupy [0, T), regions [T, T + K) of each row."""

    token_ids: np.ndarray  # (B, T) int
    type_ids: np.ndarray  # (B, T) int
    region_vecs: np.ndarray  # (B, K, P+R)
    num_tokens: np.ndarray  # (B,)
    num_regions: np.ndarray  # (B,)
    layouts: list[dict[str, np.ndarray]]

    @property
    def size(self) -> int:
        return len(self.token_ids)

    @property
    def seq_len(self) -> int:
        return self.token_ids.shape[1] + self.region_vecs.shape[1]

    @property
    def max_tokens(self) -> int:
        return self.token_ids.shape[1]

    @classmethod
    def from_triples(cls, triples: Sequence[Triple], config: ModelConfig, pad_id: int = 0) -> "Batch":
        b = len(triples)
        t_max = max(t.num_tokens for t in triples)
        k_max = max(t.num_regions for t in triples)
        dim = config.region_dim + config.box_dim
        ids = np.full((b, t_max), pad_id, dtype=np.int64)
        types = np.zeros((b, t_max), dtype=np.int64)
        regs = np.zeros((b, k_max, dim))
        layouts = []
        for i, t in enumerate(triples):
            if t.num_tokens > config.max_tokens:
                raise ValueError(f"{t.num_tokens} tokens exceed max_tokens={config.max_tokens}")
            if t.num_regions > config.max_regions:
                raise ValueError(f"{t.num_regions} regions exceed max_regions={config.max_regions}")
            if t.num_regions and t.region_vecs.shape[1] != dim:
                raise ValueError(f"region vector dim {t.region_vecs.shape[1]} != {dim}")
            nw, nt = len(t.word_ids), t.num_tokens
            ids[i, :nt] = t.token_ids
            types[i, nw:nt] = TAG
            regs[i, : t.num_regions] = t.region_vecs
            layouts.append({
                "word": np.arange(0, nw),
                "tag": np.arange(nw, nt),
                "region": np.arange(t_max, t_max + t.num_regions),
            })
        return cls(ids, types, regs, np.array([t.num_tokens for t in triples]),
                   np.array([t.num_regions for t in triples]), layouts)


def embed_batch(batch: Batch, weights: ModelWeights) -> Tensor:
    """(B, S, H) input rows.

    Tokens: word embedding + position embedding + type embedding.
    Regions: linear projection of (feature || box) + bias + region type embedding;
    regions get no sequence-position embedding, their position lives in the box.
    """
    w = weights
    b, t = batch.token_ids.shape
    tok = embedding_lookup(w["embeddings.word"], batch.token_ids)
    pos = ops.take_rows(w["embeddings.position"], np.arange(t))
    typ = embedding_lookup(w["embeddings.type"], batch.type_ids)
    x_tok = tok + pos + typ
    if batch.region_vecs.shape[1] == 0:
        return x_tok
    reg = matmul(Tensor(batch.region_vecs), w["region.weight"]) + w["region.bias"]
    reg = reg + ops.take_rows(w["embeddings.type"], [REGION])
    return ops.concat([x_tok, reg], axis=1)


def embed_triple(triple: Triple, weights: ModelWeights) -> Tensor:
    """(S, H) input rows for a single triple, S = tokens + regions."""
    return embed_batch(Batch.from_triples([triple], weights.config), weights)[0]


# ---------------------------------------------------------------- attention masks

@dataclass
class AttentionMask:
    allow: np.ndarray  # (S, S) bool, row = query, col = key
    kind: str
    pairs: frozenset = frozenset()

    @property
    def shape(self):
        return self.allow.shape


def parse_pairs(spec: str | Iterable) -> frozenset:
    """'w-v' or 'w-v,v-q' or [('word','region')] -> frozenset of segment pairs."""
    if isinstance(spec, str):
        items = [p.split("-") for p in spec.split(",") if p]
    else:
        items = [tuple(p) for p in spec]
    out = set()
    for a, b in items:
        a, b = _SHORT.get(a, a), _SHORT.get(b, b)
        if a not in SEGMENTS or b not in SEGMENTS:
            raise ValueError(f"unknown segment in pair {a}-{b}")
        out.add(frozenset((a, b)))
    return frozenset(out)


def build_mask(kind: str, layout: Mapping[str, Iterable[int]], seq_len: int | None = None,
               pairs=None) -> AttentionMask:
    """Attention pattern over a (possibly padded) sequence.

    kind: ``full``, ``seq2seq``, ``partial`` (with ``pairs``) or a pair
    shorthand such as ``w-v`` / ``v-q``. Positions outside every segment are
    padding: they see only themselves and nobody sees them.
    """
    seg = {k: np.asarray(list(layout.get(k, ())), dtype=np.int64) for k in SEGMENTS}
    if seq_len is None:
        seq_len = sum(len(v) for v in seg.values())
    allow = np.zeros((seq_len, seq_len), dtype=bool)
    valid = np.concatenate([seg[k] for k in SEGMENTS])
    if kind in ("full", "seq2seq", "partial"):
        pair_set = parse_pairs(pairs) if pairs is not None else frozenset()
    else:
        pair_set, kind = parse_pairs(kind), "partial"

    if kind == "full":
        allow[np.ix_(valid, valid)] = True
    elif kind == "seq2seq":
        cap = np.sort(seg["word"])
        img = np.concatenate([seg["tag"], seg["region"]])
        if len(cap):
            allow[np.ix_(cap, cap)] = np.tril(np.ones((len(cap), len(cap)), dtype=bool))
            allow[np.ix_(cap, img)] = True
        allow[np.ix_(img, img)] = True
    elif kind == "partial":
        if not pair_set:
            raise ValueError("partial mask needs at least one segment pair")
        involved = {s for p in pair_set for s in p}
        for a in SEGMENTS:
            for b in SEGMENTS:
                ok = frozenset((a, b)) in pair_set or (a == b and a in involved)
                if ok:
                    allow[np.ix_(seg[a], seg[b])] = True
    else:
        raise ValueError(f"unknown mask kind {kind!r}")
    np.fill_diagonal(allow, True)
    return AttentionMask(allow, kind, pair_set)


def batch_masks(batch: Batch, kind: str, pairs=None) -> np.ndarray:
    """(B, S, S) boolean masks for a padded batch."""
    s = batch.seq_len
    return np.stack([build_mask(kind, lay, s, pairs).allow for lay in batch.layouts])


# ---------------------------------------------------------------- encoder

def attention(x: Tensor, mask, weights: ModelWeights, layer: int) -> Tensor:
    """Multi-head scaled dot-product self-attention (no residual, no norm).

    ``x`` is (S, H) or (B, S, H); ``mask`` is broadcastable to (B, S, S).
    """
    cfg = weights.config
    p = f"layers.{layer}.attn."
    allow = mask.allow if isinstance(mask, AttentionMask) else np.asarray(mask, dtype=bool)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
        allow = allow.reshape(1, *allow.shape[-2:]) if allow.ndim == 2 else allow
    b, s, h = x.shape
    a, d = cfg.num_heads, cfg.head_dim

    def heads(name):
        y = matmul(x, weights[p + name + ".weight"]) + weights[p + name + ".bias"]
        return y.reshape(b, s, a, d).transpose(0, 2, 1, 3)  # (B, A, S, D)

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = matmul(q, ops.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(d))
    probs = softmax(scores, axis=-1, mask=allow[:, None, :, :] if allow.ndim == 3 else allow)
    ctx = matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, s, h)
    out = matmul(ctx, weights[p + "o.weight"]) + weights[p + "o.bias"]
    return out[0] if squeeze else out


def encoder_forward(x: Tensor, mask, weights: ModelWeights) -> Tensor:
    """Stack of pre-norm blocks followed by a final norm; identity when L = 0."""
    cfg = weights.config
    eps = cfg.ln_eps
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        hn = layer_norm(x, weights[p + "ln1.gamma"], weights[p + "ln1.beta"], eps)
        x = x + attention(hn, mask, weights, i)
        hn = layer_norm(x, weights[p + "ln2.gamma"], weights[p + "ln2.beta"], eps)
        f = gelu(matmul(hn, weights[p + "ffn.in.weight"]) + weights[p + "ffn.in.bias"])
        x = x + (matmul(f, weights[p + "ffn.out.weight"]) + weights[p + "ffn.out.bias"])
    if cfg.num_layers:
        x = layer_norm(x, weights["final_ln.gamma"], weights["final_ln.beta"], eps)
    return x


def encode(weights: ModelWeights, triples: Sequence[Triple], mask_kind: str = "full",
           pairs=None) -> tuple[Tensor, Batch]:
    """Embed + encode a list of triples; returns (B, S, H) hidden states and the batch."""
    batch = Batch.from_triples(triples, weights.config)
    x = embed_batch(batch, weights)
    return encoder_forward(x, batch_masks(batch, mask_kind, pairs), weights), batch


# ---------------------------------------------------------------- heads

def gather_rows(hidden: Tensor, batch_index, positions) -> Tensor:
    """Rows hidden[b, pos] as an (M, H) tensor."""
    b, s, h = hidden.shape
    flat = np.asarray(batch_index, dtype=np.int64) * s + np.asarray(positions, dtype=np.int64)
    return ops.take_rows(hidden.reshape(b * s, h), flat)


def mlm_logits(weights: ModelWeights, hidden: Tensor, positions, num_tokens: int | None = None,
               batch_index=None) -> Tensor:
    """Vocabulary logits at discrete-token positions.

    ``hidden`` is (S, H) or (B, S, H) (then ``batch_index`` pairs each position
    with its row). Positions at or past ``num_tokens`` point at regions and
    are rejected.
    """
    positions = np.asarray(positions, dtype=np.int64)
    if num_tokens is not None and positions.size and (positions >= np.asarray(num_tokens)).any():
        raise ValueError("mlm position points at a region")
    if hidden.ndim == 2:
        rows = ops.take_rows(hidden, positions)
    else:
        rows = gather_rows(hidden, batch_index, positions)
    return mlm_head(weights, rows)


def mlm_head(weights: ModelWeights, rows: Tensor) -> Tensor:
    return matmul(rows, weights["heads.mlm.weight"]) + weights["heads.mlm.bias"]


def cls_rows(hidden: Tensor) -> Tensor:
    return hidden[0] if hidden.ndim == 2 else hidden[:, 0, :]


def cls_binary(weights: ModelWeights, hidden: Tensor) -> Tensor:
    """Binary logit from the [CLS] row: scalar for (S, H), (B,) for (B, S, H)."""
    c = cls_rows(hidden)
    if c.ndim == 1:
        c = c.reshape(1, -1)
        return (matmul(c, weights["heads.cls.weight"]) + weights["heads.cls.bias"]).reshape(())
    return (matmul(c, weights["heads.cls.weight"]) + weights["heads.cls.bias"]).reshape(c.shape[0])


def answer_logits(weights: ModelWeights, hidden: Tensor) -> Tensor:
    c = cls_rows(hidden)
    squeeze = c.ndim == 1
    if squeeze:
        c = c.reshape(1, -1)
    out = matmul(c, weights["heads.answer.weight"]) + weights["heads.answer.bias"]
    return out[0] if squeeze else out


def nlvr_head(weights: ModelWeights, cls_a: Tensor, cls_b: Tensor) -> Tensor:
    """MLP over the two concatenated [CLS] rows: (B, H) x 2 -> (B,) logits."""
    z = ops.concat([cls_a, cls_b], axis=-1)
    hdn = gelu(matmul(z, weights["heads.nlvr.fc1.weight"]) + weights["heads.nlvr.fc1.bias"])
    out = matmul(hdn, weights["heads.nlvr.fc2.weight"]) + weights["heads.nlvr.fc2.bias"]
    return out.reshape(out.shape[0])


# ---------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"OSCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(weights: ModelWeights, path: str | Path) -> None:
    """Magic, u32 version, length-prefixed key=value config, u32 tensor count,
    then per tensor: u32 name length, name, u8 rank, u32 dims, f32 data (LE)."""
    rec = weights.config.to_record().encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(rec)), rec, struct.pack("<I", len(weights))]
    for name, p in weights.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<B", p.ndim))
        parts.append(struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> ModelWeights:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    try:
        version, rec_len = struct.unpack_from("<II", buf, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        config = ModelConfig.from_record(buf[off: off + rec_len].decode("utf-8"))
        off += rec_len
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        params = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off: off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(buf, "<f4", n, off).astype(np.float64).reshape(shape)
            off += 4 * n
            params[name] = Tensor(data, requires_grad=True, name=name)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {e}") from None
    expected = ModelWeights.shapes(config)
    got = {k: v.shape for k, v in params.items()}
    if got != dict(expected):
        raise CheckpointError("checkpoint tensors do not match the config's parameter map")
    return ModelWeights(config, params)
