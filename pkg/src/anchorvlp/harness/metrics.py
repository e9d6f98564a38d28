"""Caption metric and metric logging."""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence


def _ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: Sequence[Hashable], references: Sequence[Sequence[Hashable]]) -> float:
    """Sentence BLEU-4 without smoothing.

    Clipped n-gram precisions for n = 1..4 (clip = max count over references),
    geometric mean, brevity penalty exp(1 - r/c) when the candidate is shorter
    than the closest reference length r. Any zero precision gives 0.
    """
    c = len(candidate)
    if c == 0:
        raise ValueError("candidate must be non-empty")
    if not references:
        raise ValueError("need at least one reference")
    log_p = 0.0
    for n in range(1, 5):
        cand = _ngrams(candidate, n)
        total = sum(cand.values())
        if total == 0:
            return 0.0
        max_ref: Counter = Counter()
        for ref in references:
            max_ref |= _ngrams(ref, n)
        clipped = sum(min(cnt, max_ref[g]) for g, cnt in cand.items())
        if clipped == 0:
            return 0.0
        log_p += math.log(clipped / total) / 4.0
    # closest reference length, shorter one on ties
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


LOG_HEADER = ("step", "loss_mtl", "loss_c", "metric_name", "metric_value")


@dataclass
class MetricRecord:
    step: int
    loss_mtl: float | None
    loss_c: float | None
    metrics: dict[str, float] = field(default_factory=dict)


class MetricLog:
    """Per-eval records with strictly increasing steps; streams CSV if given a path."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[MetricRecord] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as f:
                csv.writer(f).writerow(LOG_HEADER)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def add(self, step: int, loss_mtl: float | None = None, loss_c: float | None = None, **metrics: float) -> None:
        if self.records and step <= self.records[-1].step:
            raise ValueError(f"log steps must increase ({step} after {self.records[-1].step})")
        rec = MetricRecord(step, loss_mtl, loss_c, dict(metrics))
        self.records.append(rec)
        if self.path:
            with self.path.open("a", newline="") as f:
                w = csv.writer(f)
                for row in _rows(rec):
                    w.writerow(row)

    def series(self, name: str) -> list[tuple[int, float]]:
        return [(r.step, r.metrics[name]) for r in self.records if name in r.metrics]

    def to_rows(self) -> list[tuple]:
        return [row for rec in self.records for row in _rows(rec)]


def _fmt(v):
    return "" if v is None else repr(float(v))


def _rows(rec: MetricRecord):
    if not rec.metrics:
        yield (rec.step, _fmt(rec.loss_mtl), _fmt(rec.loss_c), "", "")
    for name, val in rec.metrics.items():
        yield (rec.step, _fmt(rec.loss_mtl), _fmt(rec.loss_c), name, _fmt(val))
