"""Synthetic multimodal world: region-feature images, captions, object tags.

Images are sets of regions, each a noisy copy of its object class's prototype
vector plus a box. Captions name a subset of the image's objects inside a
fixed template. A simulated detector emits tags with configurable flip/drop
noise, so ground-truth tags, predicted tags and no tags are three arms of
the same corpus.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PAD, CLS, SEP, MASK, STOP = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[STOP]"
SPECIAL_TOKENS = (PAD, CLS, SEP, MASK, STOP)

_CLASS_NAMES = (
    "dog", "cat", "car", "tree", "cup", "bird", "ball", "chair",
    "lamp", "boat", "horse", "clock", "book", "shoe", "kite", "bowl",
)

# template words first, then question / pair-task words, then unused padding
_FILLER = (
    "a", "photo", "of", "there", "is", "here", "in", "the", "room", "we", "see",
    "and", "what", "picture", "both", "images", "show", "same", "main", "object",
    "near", "under", "on", "with", "small", "big", "red", "blue", "green", "old",
    "new", "two", "one", "some", "by", "at", "to", "from", "left", "right",
    "top", "bottom", "front", "back", "side", "street", "table", "yard", "park",
    "beach", "field",
)

TEMPLATES: tuple[tuple[str, ...], ...] = (
    ("a", "photo", "of", "{objs}"),
    ("there", "is", "{objs}", "here"),
    ("{objs}", "in", "the", "room"),
    ("we", "see", "{objs}"),
)


class WorldError(RuntimeError):
    pass


class CorpusFormatError(ValueError):
    pass


# ---------------------------------------------------------------- world

@dataclass(frozen=True)
class WorldConfig:
    num_classes: int = 8
    region_dim: int = 16
    separation: float = 1.0
    box_dim: int = 6
    max_retries: int = 1000


@dataclass
class SyntheticWorld:
    prototypes: np.ndarray  # (C, P)
    class_names: tuple[str, ...]
    filler_vocab: tuple[str, ...]
    caption_templates: tuple[tuple[str, ...], ...]
    config: WorldConfig
    seed: int

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def min_separation(self) -> float:
        p = self.prototypes
        return min(float(np.linalg.norm(p[i] - p[j])) for i in range(len(p)) for j in range(i + 1, len(p)))


def build_world(config: WorldConfig = WorldConfig(), seed: int = 0) -> SyntheticWorld:
    c, p, delta = config.num_classes, config.region_dim, config.separation
    if c < 2 or p < 2 or delta <= 0:
        raise ValueError("need num_classes >= 2, region_dim >= 2, separation > 0")
    if config.box_dim not in (4, 6):
        raise ValueError("box_dim must be 4 or 6")
    rng = np.random.default_rng(seed)
    protos = rng.normal(size=(c, p))
    for _ in range(config.max_retries):
        bad = _too_close(protos, delta)
        if bad is None:
            break
        protos[bad] = rng.normal(size=p)
    else:
        raise WorldError(f"could not place {c} prototypes {delta} apart in R^{p}")
    names = tuple(_CLASS_NAMES[i] if i < len(_CLASS_NAMES) else f"obj{i}" for i in range(c))
    return SyntheticWorld(protos, names, _FILLER, TEMPLATES, config, seed)


def _too_close(protos: np.ndarray, delta: float) -> int | None:
    for i in range(1, len(protos)):
        d = np.linalg.norm(protos[:i] - protos[i], axis=1)
        if (d <= delta).any():
            return i
    return None


# ---------------------------------------------------------------- vocabulary

class Vocabulary:
    """Dense token <-> id map with the special tokens at ids 0..4."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate token in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    pad_id, cls_id, sep_id, mask_id, stop_id = range(5)
    num_special = len(SPECIAL_TOKENS)

    @classmethod
    def for_world(cls, world: SyntheticWorld) -> "Vocabulary":
        if set(world.class_names) & set(world.filler_vocab):
            raise ValueError("class names and filler words overlap")
        return cls(list(SPECIAL_TOKENS) + list(world.class_names) + list(world.filler_vocab))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as e:
            raise KeyError(f"unknown token {e.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def class_token_id(self, class_id: int) -> int:
        return self.num_special + class_id

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


# ---------------------------------------------------------------- images

@dataclass
class ImageSample:
    features: np.ndarray  # (K, P)
    boxes: np.ndarray  # (K, R)
    classes: np.ndarray  # (K,) int

    @property
    def num_regions(self) -> int:
        return len(self.classes)

    @property
    def regions(self) -> list[tuple[np.ndarray, np.ndarray, int]]:
        return [(self.features[i], self.boxes[i], int(self.classes[i])) for i in range(self.num_regions)]

    def distinct_classes(self) -> list[int]:
        return sorted(set(int(c) for c in self.classes))


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def generate_image(world: SyntheticWorld, num_objects: int, noise_std: float, overlap_prob: float,
                   rng: np.random.Generator, max_regions: int = 50) -> ImageSample:
    """Sample one image.

    Boxes sit in distinct cells of a grid, so no two overlap, except that with
    probability ``overlap_prob`` the image gets one ambiguous region whose box
    is a jittered copy of an earlier region's box (IoU > 0.3).
    """
    if not 1 <= num_objects <= max_regions:
        raise ValueError(f"num_objects must be in [1, {max_regions}]")
    k, c = num_objects, world.num_classes
    classes = rng.integers(0, c, size=k)
    noise = rng.normal(size=(k, world.prototypes.shape[1])) * noise_std
    features = world.prototypes[classes] + noise

    g = math.ceil(math.sqrt(k))
    cells = rng.permutation(g * g)[:k]
    cell = 1.0 / g
    corners = np.empty((k, 4))
    for i, cid in enumerate(cells):
        cx, cy = (cid % g) * cell, (cid // g) * cell
        lo = rng.uniform(0.0, 0.25, size=2) * cell
        hi = rng.uniform(0.0, 0.25, size=2) * cell
        corners[i] = (cx + lo[0], cy + lo[1], cx + cell - hi[0], cy + cell - hi[1])
    if k >= 2 and rng.random() < overlap_prob:
        tgt = int(rng.integers(1, k))
        src = int(rng.integers(0, tgt))
        corners[tgt] = _jitter_box(corners[src], rng)
    return ImageSample(features, _box_features(corners, world.config.box_dim), classes)


def _jitter_box(box: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    w, h = box[2] - box[0], box[3] - box[1]
    while True:
        dx, dy = rng.uniform(-0.15, 0.15, size=2) * (w, h)
        sx, sy = rng.uniform(0.85, 1.15, size=2)
        cx, cy = (box[0] + box[2]) / 2 + dx, (box[1] + box[3]) / 2 + dy
        nb = np.clip([cx - sx * w / 2, cy - sy * h / 2, cx + sx * w / 2, cy + sy * h / 2], 0.0, 1.0)
        if nb[0] < nb[2] and nb[1] < nb[3] and iou(nb, box) > 0.3:
            return nb


def _box_features(corners: np.ndarray, box_dim: int) -> np.ndarray:
    if box_dim == 4:
        return corners.copy()
    h = corners[:, 3] - corners[:, 1]
    w = corners[:, 2] - corners[:, 0]
    return np.column_stack([corners, h, w])


# ---------------------------------------------------------------- captions & tags

def generate_caption(image: ImageSample, world: SyntheticWorld, mention_prob: float,
                     rng: np.random.Generator, budget: int = 12) -> list[str]:
    """Template caption naming each distinct object with prob ``mention_prob`` (at least one)."""
    if image.num_regions == 0:
        raise ValueError("image has no regions")
    present = image.distinct_classes()
    mentioned = [cls for cls in present if rng.random() < mention_prob]
    if not mentioned:
        mentioned = [present[int(rng.integers(len(present)))]]
    mentioned = [mentioned[i] for i in rng.permutation(len(mentioned))]
    template = world.caption_templates[int(rng.integers(len(world.caption_templates)))]
    fixed = len(template) - 1
    while len(mentioned) > 1 and fixed + _objs_len(len(mentioned)) > budget:
        mentioned.pop()
    names = [world.class_names[cls] for cls in mentioned]
    objs = names if len(names) == 1 else names[:-1] + ["and", names[-1]]
    out: list[str] = []
    for tok in template:
        out.extend(objs if tok == "{objs}" else [tok])
    return out


def _objs_len(n: int) -> int:
    return n if n == 1 else n + 1


def caption_classes(tokens: Sequence[str], world: SyntheticWorld) -> set[int]:
    lookup = {n: i for i, n in enumerate(world.class_names)}
    return {lookup[t] for t in tokens if t in lookup}


def detect_tags_detailed(image: ImageSample, world: SyntheticWorld, flip_rate: float, drop_rate: float,
                         rng: np.random.Generator) -> list[tuple[int, int | None]]:
    """Per distinct gt class: (gt class, emitted class or None when dropped)."""
    if not (0.0 <= flip_rate <= 1.0 and 0.0 <= drop_rate <= 1.0):
        raise ValueError("rates must lie in [0, 1]")
    out = []
    for cls in image.distinct_classes():
        if rng.random() < drop_rate:
            out.append((cls, None))
            continue
        emitted = cls
        if rng.random() < flip_rate:
            wrong = int(rng.integers(world.num_classes - 1))
            emitted = wrong if wrong < cls else wrong + 1
        out.append((cls, emitted))
    return out


def detect_tags(image: ImageSample, world: SyntheticWorld, flip_rate: float, drop_rate: float,
                rng: np.random.Generator) -> list[str]:
    """Simulated detector output: distinct tag names sorted by class id."""
    emitted = {e for _, e in detect_tags_detailed(image, world, flip_rate, drop_rate, rng) if e is not None}
    return [world.class_names[c] for c in sorted(emitted)]


# ---------------------------------------------------------------- triples

@dataclass
class Triple:
    """One (caption, tags, regions) sample laid out as [CLS] w [SEP] q [SEP] v."""

    word_ids: list[int]
    tag_ids: list[int]
    region_vecs: np.ndarray  # (K, P+R), float32-representable values
    region_classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def num_tokens(self) -> int:
        return len(self.word_ids) + len(self.tag_ids)

    @property
    def num_regions(self) -> int:
        return len(self.region_vecs)

    @property
    def token_ids(self) -> list[int]:
        return list(self.word_ids) + list(self.tag_ids)

    @property
    def layout(self) -> dict[str, range]:
        nw, nt = len(self.word_ids), self.num_tokens
        return {"word": range(0, nw), "tag": range(nw, nt), "region": range(nt, nt + self.num_regions)}

    def replace(self, **kw) -> "Triple":
        d = dict(word_ids=list(self.word_ids), tag_ids=list(self.tag_ids),
                 region_vecs=self.region_vecs, region_classes=self.region_classes)
        d.update(kw)
        return Triple(**d)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Triple):
            return NotImplemented
        return (list(self.word_ids) == list(other.word_ids)
                and list(self.tag_ids) == list(other.tag_ids)
                and self.region_vecs.shape == other.region_vecs.shape
                and self.region_vecs.tobytes() == other.region_vecs.tobytes()
                and np.array_equal(self.region_classes, other.region_classes))


def make_triple(caption: Sequence[str], tags: Sequence[str], image: ImageSample, vocab: Vocabulary,
                max_tokens: int = 35, max_regions: int = 50) -> Triple:
    word_ids = [vocab.cls_id] + vocab.encode(caption) + [vocab.sep_id]
    tag_ids = vocab.encode(tags) + [vocab.sep_id]
    if len(word_ids) + len(tag_ids) > max_tokens:
        raise ValueError(f"{len(word_ids) + len(tag_ids)} tokens exceed limit {max_tokens}")
    if image.num_regions > max_regions:
        raise ValueError(f"{image.num_regions} regions exceed limit {max_regions}")
    vecs = np.concatenate([image.features, image.boxes], axis=1)
    # stored at float32 precision so the corpus file round trip is bit-exact
    vecs = vecs.astype(np.float32).astype(np.float64)
    return Triple(word_ids, tag_ids, vecs, image.classes.astype(np.int64).copy())


# ---------------------------------------------------------------- corpus generation

@dataclass(frozen=True)
class CorpusConfig:
    min_regions: int = 2
    max_regions: int = 6
    noise_std: float = 0.5
    overlap_prob: float = 0.3
    mention_prob: float = 1.0
    caption_budget: int = 12
    max_tokens: int = 35
    region_limit: int = 50


TAG_MODES = ("none", "predicted", "groundtruth")


def generate_corpus(world: SyntheticWorld, n: int, seed: int, config: CorpusConfig = CorpusConfig(),
                    tag_mode: str = "groundtruth", flip_rate: float = 0.2, drop_rate: float = 0.0) -> list[Triple]:
    """``n`` aligned triples. Images and captions depend only on ``seed``; tags
    use their own stream, so the three tag modes share the same pairs."""
    if tag_mode not in TAG_MODES:
        raise ValueError(f"tag_mode must be one of {TAG_MODES}")
    vocab = Vocabulary.for_world(world)
    rng = np.random.default_rng([seed, 0])
    tag_rng = np.random.default_rng([seed, 1])
    out = []
    for _ in range(n):
        k = int(rng.integers(config.min_regions, config.max_regions + 1))
        img = generate_image(world, k, config.noise_std, config.overlap_prob, rng, config.region_limit)
        cap = generate_caption(img, world, config.mention_prob, rng, config.caption_budget)
        if tag_mode == "none":
            tags: list[str] = []
        elif tag_mode == "groundtruth":
            tags = detect_tags(img, world, 0.0, 0.0, tag_rng)
        else:
            tags = detect_tags(img, world, flip_rate, drop_rate, tag_rng)
        out.append(make_triple(cap, tags, img, vocab, config.max_tokens, config.region_limit))
    return out


def retag(triples: Sequence[Triple], world: SyntheticWorld, tag_mode: str, seed: int,
          flip_rate: float = 0.2, drop_rate: float = 0.0) -> list[Triple]:
    """Rebuild every triple's tag segment from its stored region classes."""
    if tag_mode not in TAG_MODES:
        raise ValueError(f"tag_mode must be one of {TAG_MODES}")
    vocab = Vocabulary.for_world(world)
    rng = np.random.default_rng([seed, 1])
    out = []
    for t in triples:
        if tag_mode == "none":
            names: list[str] = []
        else:
            img = ImageSample(np.zeros((t.num_regions, 0)), np.zeros((t.num_regions, 0)), t.region_classes)
            f, d = (0.0, 0.0) if tag_mode == "groundtruth" else (flip_rate, drop_rate)
            names = detect_tags(img, world, f, d, rng)
        out.append(t.replace(tag_ids=vocab.encode(names) + [vocab.sep_id]))
    return out


# ---------------------------------------------------------------- file format

MAGIC = b"OSCT"
VERSION = 1
_U32 = struct.Struct("<I")
_HEAD = struct.Struct("<4sII")
_ITEM = struct.Struct("<5I")


def save_corpus(triples: Sequence[Triple], path: str | Path) -> None:
    """Binary corpus: magic, version, count, then per triple five u32 lengths
    (words, tags, regions, region dim, labels), u32 ids, f32 region rows,
    u32 region class labels. All little-endian."""
    parts = [_HEAD.pack(MAGIC, VERSION, len(triples))]
    for t in triples:
        k = t.num_regions
        dim = t.region_vecs.shape[1] if t.region_vecs.ndim == 2 else 0
        parts.append(_ITEM.pack(len(t.word_ids), len(t.tag_ids), k, dim, len(t.region_classes)))
        parts.append(np.asarray(t.word_ids, dtype="<u4").tobytes())
        parts.append(np.asarray(t.tag_ids, dtype="<u4").tobytes())
        parts.append(np.asarray(t.region_vecs, dtype="<f4").tobytes())
        parts.append(np.asarray(t.region_classes, dtype="<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_corpus(path: str | Path) -> list[Triple]:
    buf = Path(path).read_bytes()
    if len(buf) < _HEAD.size:
        raise CorpusFormatError("file too short for header")
    magic, version, count = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CorpusFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorpusFormatError(f"unsupported corpus version {version}")
    off = _HEAD.size
    out = []
    try:
        for _ in range(count):
            nw, nt, k, dim, nl = _ITEM.unpack_from(buf, off)
            off += _ITEM.size
            w = np.frombuffer(buf, "<u4", nw, off)
            off += 4 * nw
            q = np.frombuffer(buf, "<u4", nt, off)
            off += 4 * nt
            v = np.frombuffer(buf, "<f4", k * dim, off).reshape(k, dim)
            off += 4 * k * dim
            lab = np.frombuffer(buf, "<u4", nl, off)
            off += 4 * nl
            out.append(Triple([int(i) for i in w], [int(i) for i in q], v.astype(np.float64), lab.astype(np.int64)))
    except (struct.error, ValueError) as e:
        raise CorpusFormatError(f"truncated corpus file: {e}") from None
    if off != len(buf):
        raise CorpusFormatError("trailing bytes after last triple")
    return out
