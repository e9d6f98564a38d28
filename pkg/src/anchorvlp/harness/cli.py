"""Command-line entry point."""
from __future__ import annotations

import argparse
import csv
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from ..corpus import TAG_MODES, CorpusConfig, WorldConfig, build_world, generate_corpus, save_corpus
from ..finetune import generate_caption, score_matrix
from ..model import load_checkpoint
from .config import ConfigError, RunConfig, coerce, read_config_file
from .features import export_features
from .train import (
    evaluate_caption,
    evaluate_pretrain,
    evaluate_retrieval,
    load_data,
    run,
    run_ablation,
    TASKS,
)

TRAIN_COMMANDS = ("pretrain", "finetune-retrieval", "finetune-caption", "finetune-vqa", "finetune-nlvr")
EVAL_TASKS = ("pretrain", "retrieval", "caption", "vqa", "nlvr")


class UsageError(Exception):
    pass


def _add_config_flags(p: argparse.ArgumentParser, skip=("mode",)) -> None:
    p.add_argument("--config", help="key=value config file; flags given here override it")
    for f in fields(RunConfig):
        if f.name in skip:
            continue
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar=f.name.upper())


def _build_config(args: argparse.Namespace, mode: str, need_seed: bool) -> RunConfig:
    kw = read_config_file(args.config) if args.config else {}
    for f in fields(RunConfig):
        raw = getattr(args, f.name, None)
        if raw is not None:
            kw[f.name] = coerce(f.name, raw)
    kw["mode"] = mode
    if need_seed and kw.get("seed") is None:
        raise UsageError("--seed is required for training runs")
    return RunConfig(**kw)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="anchorvlp", description="Desk-scale tag-anchored vision-language pre-training.")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-corpus", help="generate a synthetic corpus file")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--world-seed", type=int, default=0)
    g.add_argument("--num-classes", type=int, default=8)
    g.add_argument("--tag-mode", choices=TAG_MODES, default="groundtruth")
    g.add_argument("--flip-rate", type=float, default=0.2)
    g.add_argument("--drop-rate", type=float, default=0.0)

    for cmd in TRAIN_COMMANDS:
        _add_config_flags(sub.add_parser(cmd, help=f"{cmd.replace('-', ' ')} run"))

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--task", choices=EVAL_TASKS, default="retrieval")
    e.add_argument("--scores", help="write the retrieval score matrix as CSV")
    _add_config_flags(e)

    gen = sub.add_parser("generate", help="caption the eval corpus, one line per image")
    gen.add_argument("--out", help="output file (default stdout)")
    _add_config_flags(gen)

    ab = sub.add_parser("ablate", help="steps-to-threshold per tag mode and seed")
    ab.add_argument("--tag-modes", default="groundtruth,predicted,none")
    ab.add_argument("--seeds", default="1,2,3")
    ab.add_argument("--metric", default="t2i_r1")
    ab.add_argument("--threshold", type=float, default=0.8)
    ab.add_argument("--out", help="CSV of (tag_mode, seed, steps) rows (default stdout)")
    _add_config_flags(ab, skip=("mode", "tag_mode", "seed"))

    x = sub.add_parser("export-features", help="write last-layer features as CSV")
    x.add_argument("--out", required=True)
    _add_config_flags(x)
    return ap


def _need_checkpoint(cfg: RunConfig) -> None:
    if not cfg.init_checkpoint:
        raise UsageError("--init-checkpoint is required")


def _cmd_gen_corpus(a) -> int:
    world = build_world(WorldConfig(num_classes=a.num_classes), a.world_seed)
    triples = generate_corpus(world, a.n, a.seed, CorpusConfig(), a.tag_mode, a.flip_rate, a.drop_rate)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    save_corpus(triples, a.out)
    print(f"wrote {len(triples)} triples to {a.out}")
    return 0


def _cmd_eval(a) -> int:
    cfg = _build_config(a, "pretrain" if a.task == "pretrain" else f"finetune-{a.task}", need_seed=False)
    _need_checkpoint(cfg)
    w = load_checkpoint(cfg.init_checkpoint)
    data = load_data(cfg)
    if a.task == "pretrain":
        m = evaluate_pretrain(w, data.eval, cfg)
    elif a.task == "retrieval":
        s = score_matrix(w, data.eval, cfg.mask_kind)
        if a.scores:
            np.savetxt(a.scores, s, delimiter=",", fmt="%.9g")
        m = evaluate_retrieval(w, data.eval, cfg.mask_kind)
    elif a.task == "caption":
        m = evaluate_caption(w, data.eval, cfg.beam_size, cfg.max_len)
    else:
        m = TASKS[cfg.mode](cfg.replace(seed=cfg.seed or 0), data).evaluate(w)
    for k, v in m.items():
        print(f"{k}={v:.6f}")
    return 0


def _cmd_generate(a) -> int:
    cfg = _build_config(a, "finetune-caption", need_seed=False)
    _need_checkpoint(cfg)
    w = load_checkpoint(cfg.init_checkpoint)
    data = load_data(cfg)
    lines = []
    for t in data.eval:
        ids = generate_caption(w, t.tag_ids, t.region_vecs, cfg.beam_size, cfg.max_len)
        lines.append(" ".join(data.vocab.decode(ids)))
    text = "\n".join(lines) + "\n"
    if a.out:
        Path(a.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_ablate(a) -> int:
    modes = [m.strip() for m in a.tag_modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in TAG_MODES]
    if bad:
        raise UsageError(f"unknown tag modes {bad}")
    try:
        seeds = [int(s) for s in a.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError("--seeds must be comma-separated integers") from None
    if len(modes) < 2 or len(seeds) < 3:
        raise UsageError("ablation needs at least 2 tag modes and 3 seeds")
    cfg = _build_config(a, "finetune-retrieval", need_seed=False)
    res = run_ablation(cfg, modes, seeds, a.metric, a.threshold)
    out = open(a.out, "w", newline="") if a.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["tag_mode", "seed", "steps_to_threshold"])
        for mode, seed, steps in res.rows:
            w.writerow([mode, seed, "inf" if math.isinf(steps) else int(steps)])
    finally:
        if a.out:
            out.close()
    for mode, med in res.medians().items():
        print(f"median {mode}: {med}", file=sys.stderr)
    return 0


def _cmd_export(a) -> int:
    cfg = _build_config(a, "pretrain", need_seed=False)
    _need_checkpoint(cfg)
    w = load_checkpoint(cfg.init_checkpoint)
    data = load_data(cfg)
    rows = export_features(w, data.eval, a.out, data.vocab, data.world.class_names)
    print(f"wrote {len(rows)} feature rows to {a.out}")
    return 0


def _cmd_train(a) -> int:
    cfg = _build_config(a, a.command, need_seed=True)
    _, log = run(cfg)
    if log.records:
        last = log.records[-1]
        shown = ", ".join(f"{k}={v:.4f}" for k, v in last.metrics.items())
        print(f"step {last.step}: {shown}")
    return 0


COMMANDS = {
    "gen-corpus": _cmd_gen_corpus,
    "eval": _cmd_eval,
    "generate": _cmd_generate,
    "ablate": _cmd_ablate,
    "export-features": _cmd_export,
    **{c: _cmd_train for c in TRAIN_COMMANDS},
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse reports usage errors this way
        return int(e.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"anchorvlp {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure: report, do not dump a traceback
        print(f"anchorvlp {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
