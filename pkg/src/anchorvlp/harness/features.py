"""Last-layer feature export and cross-modal alignment statistics."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..corpus import Triple, Vocabulary
from ..model import ModelWeights, encode
from ..numcore import no_grad


@dataclass
class FeatureRow:
    sample_id: int
    kind: str  # word / tag / region
    label: str  # token string, or class name for regions
    class_id: int  # object class, -1 for non-object tokens
    features: np.ndarray


def extract_features(weights: ModelWeights, triples: Sequence[Triple], vocab: Vocabulary,
                     class_names: Sequence[str] | None = None, mask_kind: str = "full",
                     chunk: int = 128) -> list[FeatureRow]:
    """One row per discrete token and per region, in sequence order."""
    rows: list[FeatureRow] = []
    name_to_class = {n: i for i, n in enumerate(class_names or ())}
    for s in range(0, len(triples), chunk):
        part = triples[s: s + chunk]
        with no_grad():
            hidden, batch = encode(weights, part, mask_kind)
        h = hidden.data
        for b, t in enumerate(part):
            sid = s + b
            lay = batch.layouts[b]
            for kind in ("word", "tag"):
                for pos in lay[kind]:
                    tok = vocab.tokens[t.token_ids[pos]]
                    rows.append(FeatureRow(sid, kind, tok, name_to_class.get(tok, -1), h[b, pos].copy()))
            for r, pos in enumerate(lay["region"]):
                cid = int(t.region_classes[r]) if len(t.region_classes) > r else -1
                label = class_names[cid] if class_names is not None and cid >= 0 else str(cid)
                rows.append(FeatureRow(sid, "region", label, cid, h[b, pos].copy()))
    return rows


def export_features(weights: ModelWeights, triples: Sequence[Triple], path: str | Path, vocab: Vocabulary,
                    class_names: Sequence[str] | None = None) -> list[FeatureRow]:
    """Write CSV rows ``sample_id,kind,label,f0..f{H-1}`` and return them."""
    rows = extract_features(weights, triples, vocab, class_names)
    hdim = weights.config.hidden
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "kind", "label"] + [f"f{i}" for i in range(hdim)])
        for r in rows:
            w.writerow([r.sample_id, r.kind, r.label] + [repr(float(x)) for x in r.features])
    return rows


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def same_class_cosine(rows: Sequence[FeatureRow], text_kind: str = "tag") -> dict[str, float]:
    """Mean cosine similarity between region features and token features of
    the same object class (``same``), and of different classes (``diff``)."""
    reg = [r for r in rows if r.kind == "region" and r.class_id >= 0]
    txt = [r for r in rows if r.kind == text_kind and r.class_id >= 0]
    if not reg or not txt:
        raise ValueError("need region rows and object-token rows")
    R = _unit(np.stack([r.features for r in reg]))
    T = _unit(np.stack([r.features for r in txt]))
    rc = np.array([r.class_id for r in reg])
    tc = np.array([r.class_id for r in txt])
    sims = R @ T.T
    same = rc[:, None] == tc[None, :]
    return {"same": float(sims[same].mean()), "diff": float(sims[~same].mean())}
