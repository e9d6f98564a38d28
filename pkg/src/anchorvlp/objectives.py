"""Pre-training objective: masked token loss plus tag-pollution contrastive loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Triple, Vocabulary
from .model import ModelWeights, cls_binary, encode, mlm_logits
from .numcore import Tensor, ops
from .numcore.ops import bce_with_logits, cross_entropy_soft

MAX_DONOR_ATTEMPTS = 16


class PollutionError(ValueError):
    pass


@dataclass
class MaskedItem:
    triple: Triple
    masked_positions: list[int]  # indices into triple.token_ids
    original_ids: list[int]


@dataclass
class ContrastiveItem:
    triple: Triple
    label: int
    donor_index: int | None = None


# ---------------------------------------------------------------- masking

def eligible_positions(triple: Triple, segments=("word", "tag"), allow_ids=()) -> list[int]:
    """Discrete-token positions that may be masked: non-special tokens (plus
    any explicitly allowed special ids) in the requested segments."""
    out = []
    lay = triple.layout
    ids = triple.token_ids
    for seg in segments:
        for pos in lay[seg]:
            tok = ids[pos]
            if tok >= Vocabulary.num_special or tok in allow_ids:
                out.append(pos)
    return out


def sample_mtl_mask(triple: Triple, rate: float = 0.15, max_masked: int | None = None,
                    rng: np.random.Generator | None = None, *, segments=("word", "tag"),
                    allow_ids=(), scheme: str = "mask", vocab_size: int | None = None) -> MaskedItem:
    """Mask each eligible token independently with probability ``rate``.

    ``scheme="mask"`` always substitutes [MASK]; ``scheme="bert"`` uses the
    80/10/10 mask/random/keep split (needs ``vocab_size``). With
    ``max_masked`` set, a uniformly random subset of that size is kept.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    if scheme not in ("mask", "bert"):
        raise ValueError(f"unknown mask scheme {scheme!r}")
    rng = rng if rng is not None else np.random.default_rng()
    elig = eligible_positions(triple, segments, allow_ids)
    draws = rng.random(len(elig))
    chosen = [p for p, u in zip(elig, draws) if u < rate]
    if max_masked is not None and len(chosen) > max_masked:
        keep = np.sort(rng.choice(len(chosen), size=max_masked, replace=False))
        chosen = [chosen[i] for i in keep]
    ids = triple.token_ids
    originals = [ids[p] for p in chosen]
    for p in chosen:
        if scheme == "mask":
            ids[p] = Vocabulary.mask_id
        else:
            u = rng.random()
            if u < 0.8:
                ids[p] = Vocabulary.mask_id
            elif u < 0.9:
                if vocab_size is None:
                    raise ValueError("bert scheme needs vocab_size")
                ids[p] = int(rng.integers(Vocabulary.num_special, vocab_size))
    nw = len(triple.word_ids)
    masked = triple.replace(word_ids=ids[:nw], tag_ids=ids[nw:])
    return MaskedItem(masked, chosen, originals)


def mtl_loss(logits: Tensor, original_ids: Sequence[int]) -> tuple[Tensor, int]:
    """Mean negative log-likelihood of the original ids at the masked rows.

    Returns ``(loss, n_masked)``; with nothing masked the loss is 0 and
    ``n_masked == 0`` tells batch averaging to skip the item.
    """
    n = len(original_ids)
    if n == 0:
        return Tensor(0.0), 0
    onehot = np.zeros(logits.shape)
    onehot[np.arange(n), original_ids] = 1.0
    return cross_entropy_soft(logits, onehot).mean(), n


# ---------------------------------------------------------------- pollution

def pollute_tags(triple: Triple, donors: Sequence[Sequence[int]], p: float = 0.5,
                 rng: np.random.Generator | None = None, own_index: int | None = None) -> ContrastiveItem:
    """With probability ``p`` swap the tag segment for a donor's, labelling it 0."""
    rng = rng if rng is not None else np.random.default_rng()
    if len(donors) < 2 or len({tuple(d) for d in donors}) < 2:
        raise PollutionError("donor pool needs at least two distinct tag sequences")
    if rng.random() >= p:
        return ContrastiveItem(triple, 1, None)
    own = list(triple.tag_ids)
    for _ in range(MAX_DONOR_ATTEMPTS):
        j = int(rng.integers(len(donors)))
        if j == own_index or list(donors[j]) == own:
            continue
        return ContrastiveItem(triple.replace(tag_ids=list(donors[j])), 0, j)
    raise PollutionError(f"no distinct donor found in {MAX_DONOR_ATTEMPTS} attempts")


def pollute_image(triple: Triple, donors: Sequence[Triple], p: float = 0.5,
                  rng: np.random.Generator | None = None, own_index: int | None = None) -> ContrastiveItem:
    """Tag-free variant: swap the whole image side (tags and regions)."""
    rng = rng if rng is not None else np.random.default_rng()
    if len(donors) < 2:
        raise PollutionError("donor pool needs at least two samples")
    if rng.random() >= p:
        return ContrastiveItem(triple, 1, None)
    for _ in range(MAX_DONOR_ATTEMPTS):
        j = int(rng.integers(len(donors)))
        d = donors[j]
        if j == own_index or (d.region_vecs.shape == triple.region_vecs.shape
                              and np.array_equal(d.region_vecs, triple.region_vecs)):
            continue
        return ContrastiveItem(triple.replace(tag_ids=list(d.tag_ids), region_vecs=d.region_vecs,
                                              region_classes=d.region_classes), 0, j)
    raise PollutionError(f"no distinct donor found in {MAX_DONOR_ATTEMPTS} attempts")


def contrastive_loss(logit: Tensor, y) -> Tensor:
    """Binary NLL of label ``y`` under sigmoid(logit); elementwise for arrays."""
    y = np.asarray(y, dtype=np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("contrastive label must be 0 or 1")
    return bce_with_logits(logit, y)


def pretrain_loss(mtl: Tensor, contrastive: Tensor) -> Tensor:
    return ops.add(mtl, contrastive)


# ---------------------------------------------------------------- batch assembly

@dataclass
class PretrainItem:
    triple: Triple  # polluted then masked
    masked_positions: list[int]
    original_ids: list[int]
    label: int


def make_pretrain_item(triple: Triple, pool: Sequence[Triple], rng: np.random.Generator, *,
                       mask_rate: float = 0.15, pollute_rate: float = 0.5, own_index: int | None = None,
                       pollute: str = "tags", scheme: str = "mask", vocab_size: int | None = None) -> PretrainItem:
    if pollute == "none":
        c = ContrastiveItem(triple, 1, None)
    elif pollute == "tags":
        c = pollute_tags(triple, [t.tag_ids for t in pool], pollute_rate, rng, own_index)
    elif pollute == "image":
        c = pollute_image(triple, pool, pollute_rate, rng, own_index)
    else:
        raise ValueError(f"unknown pollution target {pollute!r}")
    # polluted tags are not the image's tags: only words are masked then
    segs = ("word", "tag") if c.label == 1 else ("word",)
    m = sample_mtl_mask(c.triple, mask_rate, None, rng, segments=segs, scheme=scheme, vocab_size=vocab_size)
    return PretrainItem(m.triple, m.masked_positions, m.original_ids, c.label)


@dataclass
class PretrainOutput:
    total: Tensor
    mtl: Tensor
    contrastive: Tensor
    logits: np.ndarray  # contrastive logits, one per item
    mtl_items: int  # items that contributed to the MTL mean


def pretrain_forward(weights: ModelWeights, items: Sequence[PretrainItem], mask_kind: str = "full",
                     contrastive: bool = True) -> PretrainOutput:
    """Joint loss over a batch: mean per-item MTL (items without masks skipped)
    plus mean contrastive loss. ``contrastive=False`` keeps only the MTL term
    (tag-free pre-training, where there are no tags to pollute)."""
    hidden, batch = encode(weights, [it.triple for it in items], mask_kind)
    rows_b, rows_p, targets, wts = [], [], [], []
    counted = [i for i, it in enumerate(items) if it.masked_positions]
    for i in counted:
        it = items[i]
        n = len(it.masked_positions)
        rows_b += [i] * n
        rows_p += it.masked_positions
        targets += it.original_ids
        wts += [1.0 / (n * len(counted))] * n
    if counted:
        logits = mlm_logits(weights, hidden, rows_p, batch.num_tokens[rows_b], batch_index=rows_b)
        onehot = np.zeros(logits.shape)
        onehot[np.arange(len(targets)), targets] = 1.0
        l_mtl = (cross_entropy_soft(logits, onehot) * np.asarray(wts)).sum()
    else:
        l_mtl = Tensor(0.0)
    z = cls_binary(weights, hidden)
    l_c = contrastive_loss(z, [it.label for it in items]).mean()
    total = pretrain_loss(l_mtl, l_c) if contrastive else l_mtl
    return PretrainOutput(total, l_mtl, l_c, z.data.copy(), len(counted))
