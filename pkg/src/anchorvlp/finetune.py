"""Downstream task adapters: retrieval, captioning, VQA-style answering, paired-image reasoning."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .corpus import ImageSample, SyntheticWorld, Triple, Vocabulary, generate_image
from .model import (
    ModelWeights,
    answer_logits,
    cls_binary,
    cls_rows,
    encode,
    mlm_logits,
    nlvr_head,
)
from .numcore import Tensor, backward, no_grad, ops
from .numcore.ops import bce_with_logits, cross_entropy_soft
from .objectives import sample_mtl_mask
from .harness.optim import OptimizerState, adamw_step, clip_grad_norm, no_decay


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


def train_step(weights: ModelWeights, loss: Tensor, state: OptimizerState, lr: float | None = None,
               clip: float = 1.0) -> float:
    grads = backward(loss, weights.params)
    clip_grad_norm(grads, clip)
    adamw_step(weights.params, grads, state, lr, decay_filter=no_decay)
    return loss.item()


# ---------------------------------------------------------------- retrieval

@dataclass
class RetrievalPair:
    word_ids: list[int]
    tag_ids: list[int]
    region_vecs: np.ndarray
    label: int
    text_index: int
    image_index: int
    replaced: str | None = None  # "image" or "caption" for negatives

    def to_triple(self) -> Triple:
        return Triple(list(self.word_ids), list(self.tag_ids), self.region_vecs)


def _pair(corpus: Sequence[Triple], ti: int, ii: int, label: int, replaced=None) -> RetrievalPair:
    return RetrievalPair(list(corpus[ti].word_ids), list(corpus[ii].tag_ids), corpus[ii].region_vecs,
                         label, ti, ii, replaced)


def make_retrieval_batch(corpus: Sequence[Triple], neg_ratio: int, rng: np.random.Generator,
                         indices: Sequence[int] | None = None) -> list[RetrievalPair]:
    """Each aligned pair plus ``neg_ratio`` negatives; a negative swaps in a
    different image or a different caption with equal probability."""
    n = len(corpus)
    if n < 2:
        raise ValueError("retrieval batches need at least two samples")
    out = []
    for i in (range(n) if indices is None else indices):
        i = int(i)
        out.append(_pair(corpus, i, i, 1))
        for _ in range(neg_ratio):
            j = int(rng.integers(n - 1))
            j = j if j < i else j + 1
            if rng.random() < 0.5:
                out.append(_pair(corpus, i, j, 0, "image"))
            else:
                out.append(_pair(corpus, j, i, 0, "caption"))
    return out


def retrieval_logits(weights: ModelWeights, pairs: Sequence[RetrievalPair], mask_kind: str = "full") -> Tensor:
    hidden, _ = encode(weights, [p.to_triple() for p in pairs], mask_kind)
    return cls_binary(weights, hidden)


def retrieval_scores(weights: ModelWeights, pairs: Sequence[RetrievalPair], mask_kind: str = "full",
                     chunk: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(pairs), chunk):
            out.append(_sigmoid(retrieval_logits(weights, pairs[s: s + chunk], mask_kind).data))
    return np.concatenate(out) if out else np.zeros(0)


def retrieval_score(weights: ModelWeights, pair: RetrievalPair, mask_kind: str = "full") -> float:
    return float(retrieval_scores(weights, [pair], mask_kind)[0])


def retrieval_loss(weights: ModelWeights, pairs: Sequence[RetrievalPair], mask_kind: str = "full") -> Tensor:
    z = retrieval_logits(weights, pairs, mask_kind)
    return bce_with_logits(z, [p.label for p in pairs]).mean()


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("OSCAR_THREADS", "1")))
    except ValueError:
        return 1


def score_matrix(weights: ModelWeights, corpus: Sequence[Triple], mask_kind: str = "full",
                 chunk: int = 256, threads: int | None = None) -> np.ndarray:
    """N x N probabilities; row = caption index, column = image index."""
    n = len(corpus)
    pairs = [_pair(corpus, i, j, int(i == j)) for i in range(n) for j in range(n)]
    threads = worker_count() if threads is None else threads
    chunks = [pairs[s: s + chunk] for s in range(0, len(pairs), chunk)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(lambda c: retrieval_scores(weights, c, mask_kind, chunk), chunks))
    else:
        parts = [retrieval_scores(weights, c, mask_kind, chunk) for c in chunks]
    return np.concatenate(parts).reshape(n, n)


def _true_ranks(scores: np.ndarray) -> np.ndarray:
    """0-based rank of the diagonal entry within each row; ties go to the lower index."""
    n = scores.shape[0]
    diag = np.diag(scores)
    higher = (scores > diag[:, None]).sum(axis=1)
    idx = np.arange(n)
    tie_before = ((scores == diag[:, None]) & (idx[None, :] < idx[:, None])).sum(axis=1)
    return higher + tie_before


def recall_at_k(scores, ks: Sequence[int] = (1, 5, 10)) -> dict[str, dict[int, float]]:
    """R@K in both directions.

    ``t2i``: each caption (row) ranks all images; ``i2t``: each image (column)
    ranks all captions. The diagonal holds the aligned pairs.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError("score matrix must be square")
    r_rows, r_cols = _true_ranks(s), _true_ranks(s.T)
    return {
        "t2i": {k: float((r_rows < k).mean()) for k in ks},
        "i2t": {k: float((r_cols < k).mean()) for k in ks},
    }


# ---------------------------------------------------------------- captioning

def to_caption_triple(triple: Triple) -> Triple:
    """Caption fine-tuning layout: the caption's closing [SEP] becomes [STOP]."""
    w = list(triple.word_ids)
    if w and w[-1] == Vocabulary.sep_id:
        w[-1] = Vocabulary.stop_id
    return triple.replace(word_ids=w)


def caption_loss(weights: ModelWeights, triples: Sequence[Triple], rng: np.random.Generator,
                 rate: float = 0.15, max_masked: int = 3) -> tuple[Tensor, int]:
    """Seq2seq masked-token loss over caption tokens (and the closing [STOP])."""
    items = [sample_mtl_mask(to_caption_triple(t), rate, max_masked, rng, segments=("word",),
                             allow_ids=(Vocabulary.stop_id,)) for t in triples]
    hidden, batch = encode(weights, [it.triple for it in items], "seq2seq")
    counted = [i for i, it in enumerate(items) if it.masked_positions]
    if not counted:
        return Tensor(0.0), 0
    rb, rp, tg, wt = [], [], [], []
    for i in counted:
        n = len(items[i].masked_positions)
        rb += [i] * n
        rp += items[i].masked_positions
        tg += items[i].original_ids
        wt += [1.0 / (n * len(counted))] * n
    logits = mlm_logits(weights, hidden, rp, batch.num_tokens[rb], batch_index=rb)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(tg)), tg] = 1.0
    return (cross_entropy_soft(logits, onehot) * np.asarray(wt)).sum(), len(counted)


def caption_finetune_step(weights: ModelWeights, triples: Sequence[Triple] | Triple, state: OptimizerState,
                          rng: np.random.Generator, lr: float | None = None, rate: float = 0.15,
                          max_masked: int = 3) -> float:
    if isinstance(triples, Triple):
        triples = [triples]
    loss, n = caption_loss(weights, triples, rng, rate, max_masked)
    if n == 0:
        return 0.0
    return train_step(weights, loss, state, lr)


@dataclass
class BeamHypothesis:
    tokens: tuple[int, ...]
    logprob: float = 0.0
    finished: bool = False


# step_fn maps a list of prefixes to an (n, V) array of next-token log-probs
StepFn = Callable[[Sequence[tuple[int, ...]]], np.ndarray]

EXCLUDED_FROM_GENERATION = (Vocabulary.pad_id, Vocabulary.cls_id, Vocabulary.sep_id, Vocabulary.mask_id)


def candidate_ids(vocab_size: int) -> np.ndarray:
    return np.array([i for i in range(vocab_size) if i not in EXCLUDED_FROM_GENERATION])


def beam_search(step_fn: StepFn, beam_size: int, max_len: int, candidates: np.ndarray,
                stop_id: int = Vocabulary.stop_id, alpha: float = 0.0) -> list[BeamHypothesis]:
    """Beam search over next-token log-probs; returns complete hypotheses best first.

    A hypothesis is complete when it emits ``stop_id`` or reaches ``max_len``;
    both kinds compete on score, so a long unfinished caption is not displaced
    by a much less likely early stop.

    Ties are broken towards earlier hypotheses and lower token ids. ``alpha``
    applies a length penalty len**alpha to the final ranking only.
    """
    if beam_size < 1 or max_len < 1:
        raise ValueError("beam_size and max_len must be >= 1")
    candidates = np.sort(np.asarray(candidates))
    live = [BeamHypothesis(())]
    finished: list[BeamHypothesis] = []
    for _ in range(max_len):
        lp = np.asarray(step_fn([h.tokens for h in live]))[:, candidates]
        k = min(beam_size, len(candidates))
        pool = []
        for hi, h in enumerate(live):
            # stable sort on -score keeps the lower token id first on ties
            top = np.argsort(-lp[hi], kind="stable")[:k]
            pool += [(h.logprob + lp[hi, j], hi, int(candidates[j])) for j in top]
        pool.sort(key=lambda c: (-c[0], c[1], c[2]))
        nxt = []
        for score, hi, tok in pool[:beam_size]:
            hyp = BeamHypothesis(live[hi].tokens + (tok,), float(score), tok == stop_id)
            (finished if hyp.finished else nxt).append(hyp)
        live = nxt
        if not live:
            break
        if finished and max(f.logprob for f in finished) >= live[0].logprob:
            break  # extensions only lower the score
    ranked = finished + [h for h in live if len(h.tokens) == max_len]

    def key(h):
        return h.logprob / (len(h.tokens) ** alpha) if alpha else h.logprob

    order = sorted(range(len(ranked)), key=lambda i: (-key(ranked[i]), i))
    return [ranked[i] for i in order]


def greedy_decode(step_fn: StepFn, max_len: int, candidates: np.ndarray,
                  stop_id: int = Vocabulary.stop_id) -> BeamHypothesis:
    candidates = np.sort(np.asarray(candidates))
    toks: tuple[int, ...] = ()
    total = 0.0
    for _ in range(max_len):
        lp = np.asarray(step_fn([toks]))[0, candidates]
        j = int(np.argmax(lp))
        toks += (int(candidates[j]),)
        total += float(lp[j])
        if toks[-1] == stop_id:
            return BeamHypothesis(toks, total, True)
    return BeamHypothesis(toks, total, False)


def generation_step_fn(weights: ModelWeights, tag_ids: Sequence[int], region_vecs: np.ndarray) -> StepFn:
    """Mask-append scoring: encode [CLS] prefix [MASK] | tags [SEP] | regions under
    the seq2seq mask and read log-probs at the [MASK] position."""
    tags = list(tag_ids)
    if not tags or tags[-1] != Vocabulary.sep_id:
        tags = tags + [Vocabulary.sep_id]
    regions = np.asarray(region_vecs, dtype=np.float64)

    def step(prefixes):
        triples = [Triple([Vocabulary.cls_id, *p, Vocabulary.mask_id], tags, regions) for p in prefixes]
        with no_grad():
            hidden, batch = encode(weights, triples, "seq2seq")
            pos = [len(p) + 1 for p in prefixes]
            logits = mlm_logits(weights, hidden, pos, batch.num_tokens, batch_index=np.arange(len(prefixes)))
            return ops.log_softmax(logits, axis=-1).data

    return step


def generate_caption(weights: ModelWeights, tag_ids: Sequence[int], region_vecs: np.ndarray,
                     beam_size: int = 5, max_len: int = 12, alpha: float = 0.0) -> list[int]:
    """Caption token ids (without [STOP]) by beam search over mask-append decoding."""
    cfg = weights.config
    limit = cfg.max_tokens - len(tag_ids) - 3  # [CLS], [MASK], tag [SEP]
    max_len = max(1, min(max_len, limit))
    hyps = beam_search(generation_step_fn(weights, tag_ids, region_vecs), beam_size, max_len,
                       candidate_ids(cfg.vocab_size), alpha=alpha)
    toks = list(hyps[0].tokens)
    return toks[:-1] if toks and toks[-1] == Vocabulary.stop_id else toks


# ---------------------------------------------------------------- VQA-style answering

QUESTION = ("what", "is", "in", "the", "picture")


@dataclass
class QASample:
    word_ids: list[int]
    tag_ids: list[int]
    region_vecs: np.ndarray
    soft_targets: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.soft_targets, dtype=np.float64)
        if (t < 0).any() or (t > 1).any():
            raise ValueError("soft targets must lie in [0, 1]")
        self.soft_targets = t

    def to_triple(self) -> Triple:
        return Triple(list(self.word_ids), list(self.tag_ids), self.region_vecs)


def make_qa_samples(triples: Sequence[Triple], vocab: Vocabulary, num_answers: int) -> list[QASample]:
    """"Which object is present?" with soft targets = share of regions per class."""
    q = [vocab.cls_id] + vocab.encode(QUESTION) + [vocab.sep_id]
    out = []
    for t in triples:
        counts = np.bincount(t.region_classes, minlength=num_answers)[:num_answers].astype(float)
        out.append(QASample(q, list(t.tag_ids), t.region_vecs, counts / max(1, t.num_regions)))
    return out


def vqa_logits(weights: ModelWeights, samples: Sequence[QASample]) -> Tensor:
    hidden, _ = encode(weights, [s.to_triple() for s in samples], "full")
    return answer_logits(weights, hidden)


def vqa_loss(weights: ModelWeights, samples: Sequence[QASample], variant: str = "bce") -> Tensor:
    """``bce``: mean over answers of sigmoid cross-entropy against the soft
    targets, averaged over samples. ``softmax``: soft-target softmax CE."""
    logits = vqa_logits(weights, samples)
    targets = np.stack([s.soft_targets for s in samples])
    if targets.shape != logits.shape:
        raise ValueError(f"target width {targets.shape[1]} != answer head width {logits.shape[1]}")
    if variant == "bce":
        return bce_with_logits(logits, targets).mean()
    if variant == "softmax":
        return cross_entropy_soft(logits, targets).mean()
    raise ValueError(f"unknown vqa loss variant {variant!r}")


def vqa_step(weights: ModelWeights, samples: Sequence[QASample], state: OptimizerState,
             lr: float | None = None, variant: str = "bce") -> float:
    return train_step(weights, vqa_loss(weights, samples, variant), state, lr)


def vqa_predict(weights: ModelWeights, samples: Sequence[QASample]) -> np.ndarray:
    with no_grad():
        z = vqa_logits(weights, samples).data
    return np.argmax(z, axis=-1)


def vqa_accuracy(pred: np.ndarray, samples: Sequence[QASample]) -> float:
    return float(np.mean([s.soft_targets[p] > 0 for p, s in zip(pred, samples)]))


# ---------------------------------------------------------------- paired-image reasoning

PAIR_SENTENCE = ("both", "images", "show", "the", "same", "main", "object")


@dataclass
class PairSample:
    word_ids: list[int]
    image_a: Triple  # tag segment + regions (word segment ignored)
    image_b: Triple
    label: int


def _dominant_image(world: SyntheticWorld, dominant: int, rng: np.random.Generator,
                    noise_std: float, overlap_prob: float) -> ImageSample:
    """Three regions of the dominant class plus 0-2 single distractors."""
    extra = int(rng.integers(0, 3))
    img = generate_image(world, 3 + extra, noise_std, overlap_prob, rng)
    others = [c for c in range(world.num_classes) if c != dominant]
    classes = np.array([dominant] * 3 + list(rng.choice(others, size=extra, replace=False)))
    classes = classes[rng.permutation(len(classes))]
    feats = world.prototypes[classes] + rng.normal(size=img.features.shape) * noise_std
    return ImageSample(feats, img.boxes, classes)


def make_pair_samples(world: SyntheticWorld, n: int, seed: int, tag_mode: str = "groundtruth",
                      noise_std: float = 0.5, overlap_prob: float = 0.3) -> list[PairSample]:
    """Balanced "same dominant object in both images?" samples."""
    from .corpus import detect_tags, make_triple

    vocab = Vocabulary.for_world(world)
    rng = np.random.default_rng([seed, 2])
    sent = [vocab.cls_id] + vocab.encode(PAIR_SENTENCE) + [vocab.sep_id]
    out = []
    for i in range(n):
        label = i % 2
        a = int(rng.integers(world.num_classes))
        b = a if label else int((a + 1 + rng.integers(world.num_classes - 1)) % world.num_classes)
        imgs = []
        for d in (a, b):
            img = _dominant_image(world, d, rng, noise_std, overlap_prob)
            tags = [] if tag_mode == "none" else detect_tags(img, world, 0.0, 0.0, rng)
            imgs.append(make_triple([], tags, img, vocab))
        out.append(PairSample(sent, imgs[0], imgs[1], label))
    return out


def nlvr_forward(weights: ModelWeights, samples: Sequence[PairSample]) -> Tensor:
    """Two encoder passes (sentence + image a, sentence + image b); the [CLS]
    rows are concatenated and scored by the MLP head. Returns (B,) logits."""
    ta = [Triple(list(s.word_ids), list(s.image_a.tag_ids), s.image_a.region_vecs) for s in samples]
    tb = [Triple(list(s.word_ids), list(s.image_b.tag_ids), s.image_b.region_vecs) for s in samples]
    ha, _ = encode(weights, ta, "full")
    hb, _ = encode(weights, tb, "full")
    return nlvr_head(weights, cls_rows(ha), cls_rows(hb))


def nlvr_loss(weights: ModelWeights, samples: Sequence[PairSample]) -> Tensor:
    return bce_with_logits(nlvr_forward(weights, samples), [s.label for s in samples]).mean()


def nlvr_accuracy(weights: ModelWeights, samples: Sequence[PairSample]) -> float:
    with no_grad():
        z = nlvr_forward(weights, samples).data
    return float(np.mean((z > 0).astype(int) == np.array([s.label for s in samples])))
