"""Run configuration: dataclass fields, key=value config files, validation."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from ..corpus import TAG_MODES

MODES = ("pretrain", "finetune-retrieval", "finetune-caption", "finetune-vqa", "finetune-nlvr")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "pretrain"
    tag_mode: str = "groundtruth"
    mask_kind: str = "full"
    steps: int = 2000
    batch: int = 32
    lr: float = 1e-3
    seed: int | None = None
    warmup: float = 0.05  # fraction of total steps
    clip: float = 1.0
    weight_decay: float = 0.01
    eval_interval: int = 100
    eval_size: int = 100
    checkpoint_interval: int = 0  # 0: only the final checkpoint
    # corpus
    world_seed: int = 0
    num_classes: int = 8
    corpus_size: int = 4000
    corpus_seed: int = 11
    flip_rate: float = 0.2
    drop_rate: float = 0.0
    train_corpus: str | None = None
    eval_corpus: str | None = None
    # objectives
    mask_rate: float = 0.15
    pollute_rate: float = 0.5
    mask_scheme: str = "mask"
    neg_ratio: int = 3
    # generation
    beam_size: int = 5
    max_len: int = 12
    # ablation: shared pre-training stage ahead of each arm's fine-tuning
    pretrain_steps: int = 2000
    pretrain_seed: int = 0
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 32
    # model
    hidden: int = 32
    num_layers: int = 2
    num_heads: int = 2
    # checkpoints
    init_checkpoint: str | None = None
    checkpoint: str | None = None
    log: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.tag_mode not in TAG_MODES:
            raise ConfigError(f"unknown tag_mode {self.tag_mode!r}; expected one of {TAG_MODES}")
        if self.steps < 0 or self.batch < 1:
            raise ConfigError("steps must be >= 0 and batch >= 1")
        if not 0.0 <= self.warmup < 1.0:
            raise ConfigError("warmup is a fraction in [0, 1)")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be positive")
        if self.mask_scheme not in ("mask", "bert"):
            raise ConfigError(f"unknown mask_scheme {self.mask_scheme!r}")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup * self.steps))

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_lines(self) -> list[str]:
        return [f"{f.name}={getattr(self, f.name)}" for f in fields(self) if getattr(self, f.name) is not None]


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(name: str, raw: str):
    """Convert a config-file string to the field's type."""
    if name not in _TYPES:
        raise ConfigError(f"unknown config key {name!r}")
    t = str(_TYPES[name])
    if raw in ("", "None") and "None" in t:
        return None
    try:
        if t.startswith("int"):
            return int(raw)
        if t.startswith("float"):
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {raw!r}") from e
    return raw


def read_config_file(path: str | Path) -> dict:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped.
    Dashes in keys are accepted as underscores."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        k = k.replace("-", "_")
        out[k] = coerce(k, v)
    return out
