"""Progressive teacher schedule.

Stage 1 (sparsity warmup): a student at sparsity ``s`` is taught by the
snapshot at level ``T`` with ``T + g <= s < T + g + i``; students below
``g + i`` are taught by the intact model.  Stage 2 (at target): every
collected teacher is replayed from the sparsest to the densest, finishing
with the intact model.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Protocol

log = logging.getLogger(__name__)

INTACT = "intact"
# guards floor() against representation error at exact range boundaries
_EPS = 1e-9


@dataclass(frozen=True)
class ScheduleConfig:
    t: float = 0.5
    g: float = 0.10
    i: float = 0.01
    warmup_steps: int = 3000
    stage2_steps: int = 2000
    final_period_fraction: float = 0.25

    def __post_init__(self):
        for name in ("t", "g", "i"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"ScheduleConfig.{name} must lie in (0, 1), got {v}")
        if not 0.0 <= self.final_period_fraction <= 1.0:
            raise ValueError(f"ScheduleConfig.final_period_fraction must lie in [0, 1], "
                             f"got {self.final_period_fraction}")
        if self.warmup_steps < 0 or self.stage2_steps < 0:
            raise ValueError("ScheduleConfig: step counts must be nonnegative")

    def validate_strict(self) -> None:
        """The ordering ``0 < i <= g < t`` a real run needs."""
        if not self.i <= self.g:
            raise ValueError(f"schedule: i ({self.i}) must not exceed g ({self.g})")
        if not self.g < self.t:
            raise ValueError(f"schedule: g ({self.g}) must be below t ({self.t})")


def level_key(k: int, i: float) -> float:
    """Sparsity level of the ``k``-th snapshot, rounded so keys compare exactly."""
    return round(k * i, 9)


class KeyStore(Protocol):
    def keys(self) -> list[float]: ...


def target_at(step: int, cfg: ScheduleConfig) -> float:
    if step < 0:
        raise ValueError("target_at: step must be nonnegative")
    if cfg.warmup_steps == 0:
        return cfg.t
    return cfg.t * min(1.0, step / cfg.warmup_steps)


def stage1_level(s_student: float, g: float, i: float) -> float | None:
    """Snapshot level responsible for ``s_student``, or None for the intact model."""
    k = math.floor((s_student - g) / i + _EPS)
    if k <= 0:
        return None
    return level_key(k, i)


def select_teacher_stage1(s_student: float, cfg: ScheduleConfig, store: KeyStore | None) -> float | str:
    level = stage1_level(s_student, cfg.g, cfg.i)
    if level is None:
        return INTACT
    available = store.keys() if store is not None else []
    if level in available:
        return level
    lower = [k for k in available if k < level]
    fallback = max(lower) if lower else INTACT
    log.warning("teacher snapshot %.4f missing; falling back to %s", level, fallback)
    return fallback


def crossed_levels(s_student: float, i: float, existing) -> list[float]:
    """Levels ``k*i <= s_student`` (k >= 1) not yet stored, in increasing order."""
    k_now = math.floor(s_student / i + _EPS)
    have = set(existing)
    return [level_key(k, i) for k in range(1, k_now + 1) if level_key(k, i) not in have]


def maybe_snapshot(s_student: float, store, cfg: ScheduleConfig, module) -> list[float]:
    """Save ``module`` under every newly reached level; returns the keys written."""
    written = []
    for key in crossed_levels(s_student, cfg.i, store.keys()):
        store.save(key, module)
        written.append(key)
    return written


def stage2_playlist(store: KeyStore | None, cfg: ScheduleConfig) -> list[tuple[float | str, int]]:
    """Weak-to-strong replay: snapshots at levels ``<= t - g`` from sparsest down, then intact."""
    total = cfg.stage2_steps
    keys = sorted((k for k in (store.keys() if store is not None else []) if k <= cfg.t - cfg.g + _EPS),
                  reverse=True)
    if not keys:
        return [(INTACT, total)]
    final = int(round(cfg.final_period_fraction * total))
    rest = total - final
    share, extra = divmod(rest, len(keys))
    playlist: list[tuple[float | str, int]] = [(k, share + (1 if n < extra else 0)) for n, k in enumerate(keys)]
    playlist.append((INTACT, final))
    return playlist


def playlist_teacher_at(playlist: list[tuple[float | str, int]], step_in_stage: int) -> float | str:
    acc = 0
    for teacher, n in playlist:
        acc += n
        if step_in_stage < acc:
            return teacher
    return playlist[-1][0]
