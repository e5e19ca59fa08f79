"""Flat ``key = value`` run configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .arch import ModelConfig
from .distill import DistillConfig
from .scheduler import ScheduleConfig
from .trainer import SPARSITY_ESTIMATORS, Ablation, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # model
    n_layer: int = 4
    d_model: int = 128
    n_head: int = 4
    d_head: int = 32
    d_int: int = 344
    context_len: int = 256
    # masks and adapters
    lora_rank: int = 1
    lora_scale: float = 1.0
    init_logalpha: float = 2.5
    hc_beta: float = 2.0 / 3.0
    hc_l: float = -0.1
    hc_r: float = 1.1
    sparsity_estimator: str = "straight_through"
    # objective
    alpha1: float = 0.01
    alpha2: float = 1.0
    kl_direction: str = "student_teacher"
    # schedule
    t: float = 0.5
    g: float = 0.10
    i: float = 0.01
    warmup_fraction: float = 0.6
    final_period_fraction: float = 0.25
    # optimisation
    lr_mask: float = 0.1
    lr_lora: float = 1e-3
    batch_size: int = 16
    seq_len: int = 128
    prune_steps: int = 5000
    ft_steps: int = 1500
    pretrain_steps: int = 3000
    lr_pretrain: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 0
    eval_windows: int = 32
    # data and paths
    corpus: str = ""
    split_fraction: float = 0.9
    prune_bytes: int = 0
    run_dir: str = "run"
    # ablation switches
    kd: bool = True
    stage1: bool = True
    stage2: bool = True
    layer_loss: bool = True
    masks_only: bool = False

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_layer=self.n_layer, d_model=self.d_model, n_head=self.n_head, d_head=self.d_head,
                           d_int=self.d_int, vocab_size=256, context_len=self.context_len)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def schedule_config(self) -> ScheduleConfig:
        tc = self.train_config()
        return ScheduleConfig(t=self.t, g=self.g, i=self.i, warmup_steps=tc.warmup_steps,
                              stage2_steps=self.prune_steps - tc.warmup_steps,
                              final_period_fraction=self.final_period_fraction)

    def distill_config(self) -> DistillConfig:
        return DistillConfig(self.alpha1, self.alpha2, self.kl_direction)

    def ablation(self) -> Ablation:
        return Ablation(self.kd, self.stage1, self.stage2, self.layer_loss, self.masks_only)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def field_type(name: str) -> type:
    return _TYPES[_FIELDS[name].type]


def coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    typ = field_type(key)
    text = raw.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is str:
            if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
                return text[1:-1]
            return text
        if typ is int:
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigError(f"config key {key!r}: expected {typ.__name__}, got {raw.strip()!r}") from None


def parse_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        values[key] = coerce(key, raw)
    return values


def validate(cfg: RunConfig) -> None:
    """Cross-field checks; every message names the offending keys."""
    def bad(msg):
        raise ConfigError(msg)

    for k in ("n_layer", "d_model", "n_head", "d_head", "d_int", "context_len", "lora_rank", "batch_size",
              "seq_len"):
        if getattr(cfg, k) <= 0:
            bad(f"{k} must be positive, got {getattr(cfg, k)}")
    for k in ("prune_steps", "ft_steps", "pretrain_steps", "eval_every", "eval_windows", "prune_bytes"):
        if getattr(cfg, k) < 0:
            bad(f"{k} must be nonnegative, got {getattr(cfg, k)}")
    for k in ("lr_mask", "lr_lora", "lr_pretrain", "alpha1", "alpha2", "weight_decay", "grad_clip"):
        if getattr(cfg, k) < 0:
            bad(f"{k} must be nonnegative, got {getattr(cfg, k)}")
    if cfg.d_model != cfg.n_head * cfg.d_head:
        bad(f"d_model ({cfg.d_model}) must equal n_head*d_head ({cfg.n_head}*{cfg.d_head})")
    if cfg.seq_len > cfg.context_len:
        bad(f"seq_len ({cfg.seq_len}) must not exceed context_len ({cfg.context_len})")
    if cfg.lora_rank > min(cfg.d_model, cfg.d_int):
        bad(f"lora_rank ({cfg.lora_rank}) must be below min(d_model, d_int)")
    for k in ("t", "g", "i"):
        if not 0.0 < getattr(cfg, k) < 1.0:
            bad(f"{k} must lie in (0, 1), got {getattr(cfg, k)}")
    if not cfg.i <= cfg.g:
        bad(f"i ({cfg.i}) must not exceed g ({cfg.g})")
    if not cfg.g < cfg.t:
        bad(f"g ({cfg.g}) must be below t ({cfg.t})")
    for k in ("warmup_fraction", "final_period_fraction"):
        if not 0.0 <= getattr(cfg, k) <= 1.0:
            bad(f"{k} must lie in [0, 1], got {getattr(cfg, k)}")
    if not 0.0 < cfg.split_fraction < 1.0:
        bad(f"split_fraction must lie in (0, 1), got {cfg.split_fraction}")
    if not cfg.hc_beta > 0:
        bad(f"hc_beta must be positive, got {cfg.hc_beta}")
    if not (cfg.hc_l < 0 and cfg.hc_r > 1):
        bad(f"hc_l ({cfg.hc_l}) must be < 0 and hc_r ({cfg.hc_r}) > 1")
    if cfg.sparsity_estimator not in SPARSITY_ESTIMATORS:
        bad(f"sparsity_estimator must be one of {', '.join(SPARSITY_ESTIMATORS)}, got {cfg.sparsity_estimator!r}")
    if cfg.kl_direction not in ("student_teacher", "teacher_student"):
        bad(f"kl_direction must be student_teacher or teacher_student, got {cfg.kl_direction!r}")


def parse_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file (if any), then ``overrides``; validated before returning."""
    values = {}
    if path is not None:
        values.update(parse_text(Path(path).read_text(encoding="utf-8")))
    for key, val in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = coerce(key, val) if isinstance(val, str) and field_type(key) is not str else val
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg
