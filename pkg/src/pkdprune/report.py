"""Structure reports and latency benchmarking of pruned models."""
from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arch import ModelConfig, maskable_param_count
from .data import generate
from .l0 import BinaryMasks
from .model import BaseWeights


@dataclass
class StructureReport:
    hidden: int
    heads: list[int]
    ints: list[int]
    surviving: int
    maskable: int
    params_before: int
    params_after: int

    @property
    def sparsity(self) -> float:
        return 1.0 - self.surviving / self.maskable


def structure_report(cfg: ModelConfig, bm: BinaryMasks, params_after: int | None = None) -> StructureReport:
    hidden = int(bm.hid.sum())
    heads = [int(h) for h in bm.head.sum(axis=1)]
    ints = [int(n) for n in bm.int.sum(axis=1)]
    surviving = (4 * cfg.d_head * sum(heads) + 3 * sum(ints)) * hidden
    before = _dense_params(cfg)
    if params_after is None:
        params_after = _sliced_params(cfg, hidden, heads, ints)
    return StructureReport(hidden, heads, ints, surviving, maskable_param_count(cfg), before, params_after)


def _dense_params(cfg: ModelConfig) -> int:
    return _sliced_params(cfg, cfg.d_model, [cfg.n_head] * cfg.n_layer, [cfg.d_int] * cfg.n_layer)


def _sliced_params(cfg: ModelConfig, hidden: int, heads: list[int], ints: list[int]) -> int:
    V = cfg.vocab_size
    n = 2 * V * hidden + cfg.context_len * hidden + hidden  # embeddings, head, final norm
    for h, di in zip(heads, ints):
        n += 4 * h * cfg.d_head * hidden + 3 * di * hidden + 2 * hidden
    return n


def format_table(rep: StructureReport, cfg: ModelConfig) -> str:
    lines = [f"{'layer':>5} {'heads':>7} {'int_dims':>10}"]
    for layer, (h, di) in enumerate(zip(rep.heads, rep.ints)):
        lines.append(f"{layer:>5} {h:>3}/{cfg.n_head:<3} {di:>5}/{cfg.d_int:<4}")
    lines += [
        f"hidden dims       {rep.hidden}/{cfg.d_model}",
        f"maskable kept     {rep.surviving}/{rep.maskable}",
        f"achieved sparsity {rep.sparsity:.6f}",
        f"params before     {rep.params_before}",
        f"params after      {rep.params_after}",
    ]
    return "\n".join(lines)


def write_report_csv(rep: StructureReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "heads", "int_dims", "hidden"])
        for layer, (h, di) in enumerate(zip(rep.heads, rep.ints)):
            w.writerow([layer, h, di, rep.hidden])
        w.writerow(["total", sum(rep.heads), sum(rep.ints), rep.hidden])
        w.writerow(["sparsity", repr(rep.sparsity), "", ""])


@dataclass
class BenchResult:
    mean: float
    stdev: float
    per_forward: float
    reps: int


def bench_generation(base: BaseWeights, prompt: np.ndarray, total_len: int, reps: int = 30,
                     warmup: int = 5) -> BenchResult:
    """Wall-clock of greedy generation from ``len(prompt)`` to ``total_len`` tokens."""
    max_new = total_len - len(prompt)
    for _ in range(warmup):
        generate(base, None, prompt, max_new)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        generate(base, None, prompt, max_new)
        times.append(time.perf_counter() - t0)
    mean = statistics.fmean(times)
    sd = statistics.stdev(times) if len(times) > 1 else 0.0
    return BenchResult(mean, sd, mean / max(1, max_new), reps)
