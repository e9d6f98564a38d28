"""Training and evaluation loops, plus the tag-anchoring ablation."""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import MutableMapping, Sequence

import numpy as np

from ..corpus import (
    CorpusConfig,
    SyntheticWorld,
    Triple,
    Vocabulary,
    WorldConfig,
    build_world,
    generate_corpus,
    load_corpus,
    retag,
)
from ..finetune import (
    caption_finetune_step,
    generate_caption,
    make_pair_samples,
    make_qa_samples,
    make_retrieval_batch,
    nlvr_accuracy,
    nlvr_loss,
    recall_at_k,
    retrieval_loss,
    score_matrix,
    train_step,
    vqa_accuracy,
    vqa_loss,
    vqa_predict,
)
from ..model import ModelConfig, ModelWeights, load_checkpoint, save_checkpoint
from ..numcore import NumericError, no_grad
from ..objectives import make_pretrain_item, pretrain_forward
from .config import RunConfig
from .metrics import MetricLog, bleu4
from .optim import OptimizerState, lr_schedule

EVAL_STREAM = 2**31 - 1  # rng stream for held-out pollution, disjoint from step streams


class TrainingError(RuntimeError):
    pass


@dataclass
class RunData:
    world: SyntheticWorld
    vocab: Vocabulary
    train: list[Triple]
    eval: list[Triple]


def _strip_tags(triples: Sequence[Triple], world: SyntheticWorld) -> list[Triple]:
    return retag(triples, world, "none", 0)


def load_data(cfg: RunConfig) -> RunData:
    """World, vocabulary and train/eval corpora for ``cfg``.

    Corpora come from files when given, otherwise they are generated from
    fixed streams of ``cfg.corpus_seed`` so every arm of an ablation sees the
    same images and captions. ``tag_mode`` then sets the tag segment.
    """
    world = build_world(WorldConfig(num_classes=cfg.num_classes), cfg.world_seed)
    vocab = Vocabulary.for_world(world)
    sets = []
    for k, path in enumerate((cfg.train_corpus, cfg.eval_corpus)):
        n = cfg.corpus_size if k == 0 else cfg.eval_size
        if path:
            ts = load_corpus(path)
            ts = _strip_tags(ts, world) if cfg.tag_mode == "none" else ts
        else:
            base = generate_corpus(world, n, cfg.corpus_seed + k, CorpusConfig())
            ts = retag(base, world, cfg.tag_mode, cfg.corpus_seed + 100 + k, cfg.flip_rate, cfg.drop_rate)
        sets.append(ts)
    return RunData(world, vocab, sets[0], sets[1][: cfg.eval_size])


def model_config(cfg: RunConfig, data: RunData) -> ModelConfig:
    wc = data.world.config
    return ModelConfig(hidden=cfg.hidden, num_layers=cfg.num_layers, num_heads=cfg.num_heads,
                       vocab_size=len(data.vocab), region_dim=wc.region_dim, box_dim=wc.box_dim,
                       num_answers=data.world.num_classes)


def initial_weights(cfg: RunConfig, data: RunData) -> ModelWeights:
    if cfg.init_checkpoint:
        return load_checkpoint(cfg.init_checkpoint)
    if cfg.seed is None:
        raise TrainingError("a seed is required to initialise weights")
    return ModelWeights.init(model_config(cfg, data), cfg.seed)


def _require_seed(cfg: RunConfig) -> int:
    if cfg.seed is None:
        raise TrainingError("training runs need an explicit seed")
    return cfg.seed


def _checkpoint(weights: ModelWeights, cfg: RunConfig, step: int | None = None) -> None:
    if not cfg.checkpoint:
        return
    path = Path(cfg.checkpoint)
    if step is not None:
        path = path.with_name(f"{path.stem}.step{step}{path.suffix}")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(weights, path)


def _want_checkpoint(cfg: RunConfig, step: int) -> bool:
    return cfg.checkpoint_interval > 0 and step % cfg.checkpoint_interval == 0 and step < cfg.steps


def _is_eval_step(cfg: RunConfig, step: int) -> bool:
    return step % cfg.eval_interval == 0 or step == cfg.steps


def _guarded(step: int, fn):
    """Run one step; numeric blow-ups become a TrainingError naming the step."""
    try:
        return fn()
    except NumericError as e:
        raise TrainingError(f"non-finite value at step {step}: {e}") from e


# ---------------------------------------------------------------- pre-training

def pretrain_items(triples: Sequence[Triple], rng: np.random.Generator, cfg: RunConfig,
                   indices: Sequence[int], vocab_size: int):
    pollute = "none" if cfg.tag_mode == "none" else "tags"
    return [make_pretrain_item(triples[i], triples, rng, mask_rate=cfg.mask_rate, pollute_rate=cfg.pollute_rate,
                               own_index=int(i), pollute=pollute, scheme=cfg.mask_scheme, vocab_size=vocab_size)
            for i in indices]


def evaluate_pretrain(weights: ModelWeights, triples: Sequence[Triple], cfg: RunConfig,
                      chunk: int = 256) -> dict[str, float]:
    """Held-out MTL loss and pollution-detection accuracy on a fixed draw of
    masks and pollutions (the same for every call)."""
    rng = np.random.default_rng(EVAL_STREAM)
    items = pretrain_items(triples, rng, cfg, range(len(triples)), weights.config.vocab_size)
    mtl_sum, mtl_n, correct = 0.0, 0, 0
    with no_grad():
        for s in range(0, len(items), chunk):
            part = items[s: s + chunk]
            out = pretrain_forward(weights, part, cfg.mask_kind)
            mtl_sum += out.mtl.item() * out.mtl_items
            mtl_n += out.mtl_items
            correct += int(((out.logits > 0).astype(int) == [it.label for it in part]).sum())
    res = {"eval_mtl": mtl_sum / max(mtl_n, 1)}
    if cfg.tag_mode != "none":
        res["pollution_acc"] = correct / len(items)
    return res


def train_pretrain(cfg: RunConfig, data: RunData | None = None,
                   weights: ModelWeights | None = None) -> tuple[ModelWeights, MetricLog]:
    """Joint MTL + contrastive pre-training. Without tags the contrastive term
    is dropped, leaving a masked-token-only baseline."""
    seed = _require_seed(cfg)
    data = data or load_data(cfg)
    weights = weights or initial_weights(cfg, data)
    log = MetricLog(cfg.log)
    if cfg.steps == 0:
        _checkpoint(weights, cfg)
        return weights, log
    state = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(data.train)
    acc_mtl, acc_c = [], []
    for step in range(cfg.steps):
        rng = np.random.default_rng([seed, step])
        idx = rng.integers(n, size=cfg.batch)

        def one():
            items = pretrain_items(data.train, rng, cfg, idx, weights.config.vocab_size)
            out = pretrain_forward(weights, items, cfg.mask_kind, contrastive=cfg.tag_mode != "none")
            parts = (out.total.item(), out.mtl.item(), out.contrastive.item())
            if not all(map(math.isfinite, parts)):
                raise TrainingError(f"non-finite loss at step {step + 1}: total={parts[0]} mtl={parts[1]} c={parts[2]}")
            train_step(weights, out.total, state, lr_schedule(step, cfg.steps, cfg.lr, cfg.warmup_steps), cfg.clip)
            return parts

        _, l_mtl, l_c = _guarded(step + 1, one)
        acc_mtl.append(l_mtl)
        acc_c.append(l_c)
        done = step + 1
        if _is_eval_step(cfg, done):
            log.add(done, float(np.mean(acc_mtl)), float(np.mean(acc_c)) if cfg.tag_mode != "none" else None,
                    **evaluate_pretrain(weights, data.eval, cfg))
            acc_mtl, acc_c = [], []
        if _want_checkpoint(cfg, done):
            _checkpoint(weights, cfg, done)
    _checkpoint(weights, cfg)
    return weights, log


# ---------------------------------------------------------------- fine-tuning

def evaluate_retrieval(weights: ModelWeights, triples: Sequence[Triple], mask_kind: str = "full") -> dict[str, float]:
    r = recall_at_k(score_matrix(weights, triples, mask_kind), (1, 5, 10))
    return {f"{d}_r{k}": v for d in ("t2i", "i2t") for k, v in r[d].items()}


def evaluate_caption(weights: ModelWeights, triples: Sequence[Triple], beam_size: int = 5,
                     max_len: int = 12) -> dict[str, float]:
    scores = []
    for t in triples:
        cand = generate_caption(weights, t.tag_ids, t.region_vecs, beam_size, max_len)
        ref = [i for i in t.word_ids if i >= Vocabulary.num_special]
        scores.append(bleu4(cand, [ref]) if cand else 0.0)
    return {"bleu4": float(np.mean(scores))}


@dataclass
class _Task:
    step: callable  # (weights, state, rng, lr) -> loss
    evaluate: callable  # weights -> metrics


def _retrieval_task(cfg: RunConfig, data: RunData) -> _Task:
    def step(w, state, rng, lr):
        pairs = make_retrieval_batch(data.train, cfg.neg_ratio, rng, rng.integers(len(data.train), size=cfg.batch))
        return train_step(w, retrieval_loss(w, pairs, cfg.mask_kind), state, lr, cfg.clip)

    return _Task(step, lambda w: evaluate_retrieval(w, data.eval, cfg.mask_kind))


def _caption_task(cfg: RunConfig, data: RunData) -> _Task:
    def step(w, state, rng, lr):
        idx = rng.integers(len(data.train), size=cfg.batch)
        return caption_finetune_step(w, [data.train[i] for i in idx], state, rng, lr, cfg.mask_rate)

    return _Task(step, lambda w: evaluate_caption(w, data.eval, cfg.beam_size, cfg.max_len))


def _vqa_task(cfg: RunConfig, data: RunData) -> _Task:
    k = data.world.num_classes
    train = make_qa_samples(data.train, data.vocab, k)
    held = make_qa_samples(data.eval, data.vocab, k)

    def step(w, state, rng, lr):
        idx = rng.integers(len(train), size=cfg.batch)
        return train_step(w, vqa_loss(w, [train[i] for i in idx]), state, lr, cfg.clip)

    return _Task(step, lambda w: {"vqa_acc": vqa_accuracy(vqa_predict(w, held), held)})


def _nlvr_task(cfg: RunConfig, data: RunData) -> _Task:
    train = make_pair_samples(data.world, cfg.corpus_size, cfg.corpus_seed, cfg.tag_mode)
    held = make_pair_samples(data.world, cfg.eval_size, cfg.corpus_seed + 1, cfg.tag_mode)

    def step(w, state, rng, lr):
        idx = rng.integers(len(train), size=cfg.batch)
        return train_step(w, nlvr_loss(w, [train[i] for i in idx]), state, lr, cfg.clip)

    return _Task(step, lambda w: {"nlvr_acc": nlvr_accuracy(w, held)})


TASKS = {
    "finetune-retrieval": _retrieval_task,
    "finetune-caption": _caption_task,
    "finetune-vqa": _vqa_task,
    "finetune-nlvr": _nlvr_task,
}


def train_finetune(cfg: RunConfig, data: RunData | None = None, weights: ModelWeights | None = None,
                   stop_metric: str | None = None, threshold: float | None = None,
                   eval_at_start: bool = False) -> tuple[ModelWeights, MetricLog]:
    """Fine-tune for ``cfg.mode``. With ``stop_metric``/``threshold`` set the
    run ends at the first eval where the metric reaches the threshold."""
    seed = _require_seed(cfg)
    if cfg.mode not in TASKS:
        raise TrainingError(f"{cfg.mode!r} is not a fine-tuning mode")
    data = data or load_data(cfg)
    weights = weights or initial_weights(cfg, data)
    task = TASKS[cfg.mode](cfg, data)
    log = MetricLog(cfg.log)
    state = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)

    def reached(metrics):
        return stop_metric is not None and metrics[stop_metric] >= threshold

    if eval_at_start:
        m = task.evaluate(weights)
        log.add(0, **m)
        if reached(m):
            return weights, log
    losses = []
    for step in range(cfg.steps):
        rng = np.random.default_rng([seed, step])
        lr = lr_schedule(step, cfg.steps, cfg.lr, cfg.warmup_steps)
        loss = _guarded(step + 1, lambda: task.step(weights, state, rng, lr))
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step + 1}: {loss}")
        losses.append(loss)
        done = step + 1
        if _is_eval_step(cfg, done):
            m = task.evaluate(weights)
            log.add(done, train_loss=float(np.mean(losses)), **m)
            losses = []
            if reached(m):
                break
        if _want_checkpoint(cfg, done):
            _checkpoint(weights, cfg, done)
    _checkpoint(weights, cfg)
    return weights, log


def run(cfg: RunConfig) -> tuple[ModelWeights, MetricLog]:
    if cfg.mode == "pretrain":
        return train_pretrain(cfg)
    return train_finetune(cfg)


# ---------------------------------------------------------------- ablation

@dataclass
class AblationResult:
    metric: str
    threshold: float
    rows: list[tuple[str, int, float]] = field(default_factory=list)  # (tag_mode, seed, steps or inf)
    logs: dict[tuple[int, int], MetricLog] = field(default_factory=dict)  # (arm index, seed) -> curve

    def medians(self) -> dict[str, float]:
        arms: dict[str, list[float]] = {}
        for mode, _, s in self.rows:
            arms.setdefault(mode, []).append(s)
        return {m: float(statistics.median(v)) for m, v in arms.items()}


def steps_to_threshold(log: MetricLog, metric: str, threshold: float) -> float:
    """Earliest logged step whose metric reaches ``threshold``; +inf if none."""
    for step, v in log.series(metric):
        if v >= threshold:
            return float(step)
    return math.inf


# fields that cannot change a pre-training run; normalized out of cache keys
_FINETUNE_ONLY = dict(neg_ratio=3, beam_size=5, max_len=12, pretrain_steps=0, pretrain_seed=0, pretrain_lr=1.0,
                      pretrain_batch=1)


def pretrain_arm(cfg: RunConfig, tag_mode: str, steps: int | None = None,
                 cache: MutableMapping | None = None) -> tuple[RunData, ModelWeights]:
    """Data and pre-trained weights for one ablation arm, memoized in ``cache``.

    Uses ``cfg.pretrain_seed/lr/batch`` and evaluates only at the end."""
    pt_steps = cfg.pretrain_steps if steps is None else steps
    arm_cfg = cfg.replace(tag_mode=tag_mode, log=None, checkpoint=None)
    pt_cfg = arm_cfg.replace(mode="pretrain", steps=pt_steps, seed=cfg.pretrain_seed, lr=cfg.pretrain_lr,
                             batch=cfg.pretrain_batch, eval_interval=max(pt_steps, 1))
    key = tuple(pt_cfg.replace(**_FINETUNE_ONLY).to_lines())
    if cache is not None and key in cache:
        return cache[key]
    data = load_data(arm_cfg)
    w0, _ = train_pretrain(pt_cfg, data)
    if cache is not None:
        cache[key] = (data, w0)
    return data, w0


def run_ablation(cfg: RunConfig, tag_modes: Sequence[str], seeds: Sequence[int], metric: str = "t2i_r1",
                 threshold: float = 0.8, pretrain_steps: int | None = None,
                 early_stop: bool = True, cache: MutableMapping | None = None) -> AblationResult:
    """Steps-to-threshold per arm and seed.

    Every arm runs the same pre-train + retrieval fine-tune config and differs
    only in ``tag_mode``. Pre-training uses ``cfg.pretrain_seed``; the
    ablation seeds drive fine-tuning (batch order and negatives). Pass
    ``cache`` to share pre-trained arms across calls.
    """
    if len(tag_modes) < 2 or len(seeds) < 3:
        raise ValueError("an ablation needs at least 2 arms and 3 seeds")
    res = AblationResult(metric, threshold)
    cache = {} if cache is None else cache
    for arm, mode in enumerate(tag_modes):
        data, w0 = pretrain_arm(cfg, mode, pretrain_steps, cache)
        for seed in seeds:
            ft_cfg = cfg.replace(mode="finetune-retrieval", tag_mode=mode, seed=seed, log=None, checkpoint=None)
            _, log = train_finetune(ft_cfg, data, w0.copy(), metric if early_stop else None, threshold,
                                    eval_at_start=True)
            res.logs[(arm, seed)] = log
            res.rows.append((mode, seed, steps_to_threshold(log, metric, threshold)))
    return res
