"""Training loops: base pretraining, progressive-KD pruning and post fine-tuning."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .arch import ModelConfig
from .data import Corpus, next_token_loss, perplexity, sample_batch
from .distill import DistillConfig, kl_loss, layer_loss, total_loss
from .l0 import (LagrangianState, achieved_sparsity, deterministic_sparsity, lagrangian_loss, open_probability,
                 straight_through_masks)
from .lightweight import LightweightModule
from .model import BaseWeights, forward, forward_params, init_base
from .optim import AdamW, ParamGroup
from .scheduler import (INTACT, ScheduleConfig, maybe_snapshot, playlist_teacher_at, select_teacher_stage1,
                        stage2_playlist, target_at)
from .store import ResidencyTracker, ResidentReport, SnapshotStore

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "t_current", "s_hat", "teacher_key", "kl", "layer", "l0", "total", "lambda1", "lambda2",
               "eval_ppl")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_mask: float = 0.1
    lr_lora: float = 1e-3
    batch_size: int = 16
    seq_len: int = 128
    prune_steps: int = 5000
    warmup_fraction: float = 0.6
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
    lora_rank: int = 1
    lora_scale: float = 1.0
    init_logalpha: float = 2.5
    hc_beta: float = 2.0 / 3.0
    hc_l: float = -0.1
    hc_r: float = 1.1
    sparsity_estimator: str = "straight_through"

    def __post_init__(self):
        for name in ("batch_size", "seq_len", "lora_rank"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        for name in ("lr_mask", "lr_lora", "lr_pretrain", "eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"TrainConfig.{name} must be nonnegative")
        for name in ("prune_steps", "ft_steps", "pretrain_steps", "eval_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"TrainConfig.{name} must be nonnegative")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("TrainConfig.warmup_fraction must lie in [0, 1]")
        if self.sparsity_estimator not in SPARSITY_ESTIMATORS:
            raise ValueError(f"TrainConfig.sparsity_estimator must be one of {SPARSITY_ESTIMATORS}")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.prune_steps))


@dataclass(frozen=True)
class Ablation:
    """Switches reproducing the ablation variants.

    ``kd=False`` trains with next-token loss only; ``stage1`` / ``stage2``
    toggle the progressive teacher choice in each stage (the intact model
    teaches otherwise); ``masks_only`` freezes LoRA.
    """

    kd: bool = True
    stage1: bool = True
    stage2: bool = True
    layer_loss: bool = True
    masks_only: bool = False

    @property
    def progressive(self) -> bool:
        return self.kd and (self.stage1 or self.stage2)


@dataclass
class RunLog:
    rows: list[dict] = field(default_factory=list)
    residency: list[ResidentReport] = field(default_factory=list)
    snapshots: list[tuple[int, float]] = field(default_factory=list)  # (step, key)

    def append(self, row: dict) -> None:
        self.rows.append(row)

    def write_csv(self, path: str | Path) -> None:
        emit_metrics(self, path)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return str(v)


def emit_metrics(runlog: RunLog, path: str | Path) -> None:
    """One row per step in ``CSV_COLUMNS`` order; floats at full precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in runlog.rows:
            w.writerow([_fmt(row.get(c)) for c in CSV_COLUMNS])


def teacher_label(key) -> str:
    if key is None:
        return "none"
    if key == INTACT:
        return INTACT
    return f"{key:.6f}"


@dataclass
class PruneResult:
    module: LightweightModule
    log: RunLog
    store: SnapshotStore | None
    tracker: ResidencyTracker
    lagrangian: LagrangianState

    @property
    def final_sparsity(self) -> float:
        return self.log.rows[-1]["s_hat"] if self.log.rows else 0.0


def _rngs(seed: int):
    return (np.random.default_rng([seed, 1]), np.random.default_rng([seed, 2]), np.random.default_rng([seed, 3]))


def new_student(cfg: ModelConfig, tc: TrainConfig, rng: np.random.Generator) -> LightweightModule:
    return LightweightModule.init(cfg, rng, rank=tc.lora_rank, scale=tc.lora_scale,
                                  init_logalpha=tc.init_logalpha, beta=tc.hc_beta, l=tc.hc_l, r=tc.hc_r)


SPARSITY_ESTIMATORS = ("sampled", "straight_through", "open_probability")


def _constraint_masks(student: LightweightModule, sout, tc: TrainConfig):
    """Gate values fed to the sparsity constraint, per ``tc.sparsity_estimator``."""
    if tc.sparsity_estimator == "sampled":
        return sout.masks
    if tc.sparsity_estimator == "straight_through":
        return straight_through_masks(student.masks)
    return open_probability(student.masks)


def prune(base: BaseWeights, corpus: Corpus, tc: TrainConfig, sc: ScheduleConfig, dc: DistillConfig,
          ablation: Ablation = Ablation(), store_dir: str | Path | None = None) -> PruneResult:
    """Learn masks and LoRA under the sparsity constraint with progressive teachers.

    ``sc.warmup_steps`` / ``sc.stage2_steps`` define the two stages; the
    Lagrangian target follows the linear warmup and stays at ``t`` after it.
    """
    cfg = base.cfg
    rng_data, rng_mask, rng_init = _rngs(tc.seed)
    checksum = base.checksum()
    student = new_student(cfg, tc, rng_init)
    lag = LagrangianState.init()
    opt = AdamW(
        [ParamGroup(student.masks.parameters(), tc.lr_mask),
         ParamGroup(student.lora.parameters(), 0.0 if ablation.masks_only else tc.lr_lora, tc.weight_decay),
         ParamGroup(lag.parameters(), tc.lr_mask, ascent=True, clip=False)],
        beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps, max_grad_norm=tc.grad_clip or None)
    leaves = student.parameters() + lag.parameters()

    tracker = ResidencyTracker()
    tracker.register_base(base.num_params())
    tracker.register_student(student, opt.state_size())
    store = None
    if ablation.progressive:
        if store_dir is None:
            raise ValueError("prune: progressive distillation needs a snapshot directory")
        store = SnapshotStore(store_dir, cfg, tracker)
        if len(store):
            raise ValueError(f"prune: snapshot store {store_dir} is not empty")

    total_steps = sc.warmup_steps + sc.stage2_steps
    runlog = RunLog()
    s_det = deterministic_sparsity(student.masks, cfg)
    playlist = None
    bad_steps = 0
    alpha1 = dc.alpha1 if ablation.layer_loss else 0.0
    dcfg = DistillConfig(alpha1, dc.alpha2, dc.kl_direction)

    for step in range(total_steps):
        stage = 1 if step < sc.warmup_steps else 2
        t_cur = target_at(step, sc) if stage == 1 else sc.t
        lag.t_current = t_cur

        key = None
        if ablation.kd:
            if stage == 1:
                key = select_teacher_stage1(s_det, sc, store) if (ablation.stage1 and store) else INTACT
            else:
                if playlist is None:
                    playlist = stage2_playlist(store, sc) if (ablation.stage2 and store) else \
                        [(INTACT, sc.stage2_steps)]
                    log.info("stage 2 playlist: %s", playlist)
                key = playlist_teacher_at(playlist, step - sc.warmup_steps)
        teacher = None
        if store is not None:
            if key is None or key == INTACT:
                store.release_teacher()
            else:
                teacher = store.load_teacher(key)

        batch = sample_batch(corpus.train, rng_data, tc.batch_size, tc.seq_len)
        sout = forward(base, student, batch.inputs, "sampled", rng_mask)
        l0 = lagrangian_loss(achieved_sparsity(_constraint_masks(student, sout, tc), cfg), lag, t_cur)
        if ablation.kd:
            with ad.no_grad():
                tout = forward(base, teacher, batch.inputs, "deterministic")
            kl = kl_loss(sout.logits, tout.logits, dcfg.kl_direction)
            lay = layer_loss(sout.hidden_states, tout.hidden_states) if alpha1 > 0 else ad.Tensor(0.0)
            total = total_loss(kl, lay, l0, dcfg)
        else:
            kl = next_token_loss(sout.logits, batch.targets)
            lay = ad.Tensor(0.0)
            total = ad.add(kl, ad.mul(l0, dcfg.alpha2))

        if not math.isfinite(total.item()):
            bad_steps += 1
            if bad_steps >= 10:
                raise TrainingDiverged(f"non-finite loss for 10 consecutive steps (step {step})")
        else:
            bad_steps = 0
            ad.backward(total, leaves)
            opt.step()

        s_det = deterministic_sparsity(student.masks, cfg)
        if store is not None:
            student.step = step
            for k in maybe_snapshot(s_det, store, sc, student):
                runlog.snapshots.append((step, k))
        eval_ppl = None
        if tc.eval_every and (step + 1) % tc.eval_every == 0 and corpus.valid.size > tc.seq_len:
            eval_ppl = perplexity(base, student, corpus.valid, tc.seq_len, tc.eval_windows)
        runlog.append({"step": step, "t_current": float(t_cur), "s_hat": float(s_det),
                       "teacher_key": teacher_label(key), "kl": kl.item(), "layer": lay.item(),
                       "l0": l0.item(), "total": total.item(), "lambda1": lag.lambda1.item(),
                       "lambda2": lag.lambda2.item(), "eval_ppl": eval_ppl})
        runlog.residency.append(tracker.report())
        if step % 100 == 0:
            log.info("step %d t=%.3f s=%.4f teacher=%s total=%.4f", step, t_cur, s_det,
                     teacher_label(key), total.item())

    if store is not None:
        store.release_teacher()
    if base.checksum() != checksum:
        raise RuntimeError("base weights were modified during pruning")
    return PruneResult(student, runlog, store, tracker, lag)


def schedule_for(tc: TrainConfig, t: float, g: float, i: float, final_period_fraction: float = 0.25) -> ScheduleConfig:
    w = tc.warmup_steps
    return ScheduleConfig(t=t, g=g, i=i, warmup_steps=w, stage2_steps=tc.prune_steps - w,
                          final_period_fraction=final_period_fraction)


def post_finetune(base: BaseWeights, module: LightweightModule, corpus: Corpus, tc: TrainConfig,
                  steps: int | None = None) -> LightweightModule:
    """Train only the LoRA adapters with next-token loss; masks stay frozen."""
    steps = tc.ft_steps if steps is None else steps
    out = module.frozen_copy()
    lora_params = out.lora.parameters()
    for p in lora_params:
        p.requires_grad = True
    if steps == 0:
        return out
    rng = np.random.default_rng([tc.seed, 4])
    opt = AdamW([ParamGroup(lora_params, tc.lr_lora, tc.weight_decay)], beta1=tc.beta1, beta2=tc.beta2,
                eps=tc.eps, max_grad_norm=tc.grad_clip or None)
    bad_steps = 0
    for step in range(steps):
        batch = sample_batch(corpus.train, rng, tc.batch_size, tc.seq_len)
        out_f = forward(base, out, batch.inputs, "deterministic")
        loss = next_token_loss(out_f.logits, batch.targets)
        if not math.isfinite(loss.item()):
            bad_steps += 1
            if bad_steps >= 10:
                raise TrainingDiverged(f"fine-tune: non-finite loss for 10 consecutive steps (step {step})")
            continue
        bad_steps = 0
        ad.backward(loss, lora_params)
        opt.step()
    return out


def pretrain(cfg: ModelConfig, corpus: Corpus, tc: TrainConfig, steps: int | None = None,
             lr: float | None = None) -> tuple[BaseWeights, list[float]]:
    """Train a dense base from scratch with next-token loss (linear warmup, cosine decay)."""
    steps = tc.pretrain_steps if steps is None else steps
    lr = tc.lr_pretrain if lr is None else lr
    rng_data, _, rng_init = _rngs(tc.seed)
    init = init_base(cfg, rng_init)
    params = {k: ad.Tensor(v.copy(), requires_grad=True) for k, v in init.arrays.items()}
    leaves = [params[k] for k in sorted(params)]
    group = ParamGroup(leaves, lr, tc.weight_decay)
    opt = AdamW([group], beta1=tc.beta1, beta2=0.99, eps=tc.eps, max_grad_norm=tc.grad_clip or None)
    warm = max(1, steps // 20)
    losses = []
    for step in range(steps):
        if step < warm:
            group.lr = lr * (step + 1) / warm
        else:
            group.lr = lr * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / max(1, steps - warm)))
            group.lr = max(group.lr, lr * 0.05)
        batch = sample_batch(corpus.train, rng_data, tc.batch_size, tc.seq_len)
        out = forward_params(cfg, params, batch.inputs)
        loss = next_token_loss(out.logits, batch.targets)
        ad.backward(loss, leaves)
        opt.step()
        losses.append(loss.item())
        if step % 200 == 0:
            log.info("pretrain step %d loss %.4f", step, losses[-1])
    return BaseWeights(cfg, {k: v.data for k, v in params.items()}), losses
