"""Byte-level corpus handling, perplexity and greedy decoding."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import BaseWeights, forward
from .lightweight import LightweightModule

VOCAB_SIZE = 256


@dataclass
class Corpus:
    train: np.ndarray  # int64 byte ids
    valid: np.ndarray
    window: int

    @property
    def n_train_windows(self) -> int:
        return self.train.size // self.window

    @property
    def n_valid_windows(self) -> int:
        return self.valid.size // self.window


@dataclass
class Batch:
    inputs: np.ndarray  # [batch, seq_len]
    targets: np.ndarray  # [batch, seq_len]


def encode(text: str | bytes) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def decode(ids) -> str:
    return bytes(int(i) for i in ids).decode("utf-8", errors="replace")


def corpus_from_ids(ids: np.ndarray, split_fraction: float = 0.9, window: int = 128) -> Corpus:
    """Split whole windows: the first ``floor(n * split_fraction)`` train, the rest validate."""
    if ids.size == 0:
        raise ValueError("corpus is empty")
    if not 0.0 < split_fraction <= 1.0:
        raise ValueError(f"split_fraction must lie in (0, 1], got {split_fraction}")
    n = ids.size // window
    if n == 0:
        raise ValueError(f"corpus of {ids.size} bytes is shorter than one window of {window}")
    n_train = int(math.floor(n * split_fraction + 1e-9))
    cut = n_train * window
    return Corpus(ids[:cut].copy(), ids[cut:n * window].copy(), window)


def load_corpus(path: str | Path, split_fraction: float = 0.9, window: int = 128) -> Corpus:
    data = Path(path).read_bytes()
    if not data:
        raise ValueError(f"corpus file {path} is empty")
    return corpus_from_ids(encode(data), split_fraction, window)


def builtin_text() -> str:
    """English prose shipped with CPython (the pydoc topic help), in a fixed order."""
    from pydoc_data.topics import topics

    return "\n\n".join(topics[k] for k in sorted(topics))


def sample_batch(ids: np.ndarray, rng: np.random.Generator, batch: int, seq_len: int) -> Batch:
    """Uniformly random windows; targets are the inputs shifted left by one."""
    if ids.size <= seq_len:
        raise ValueError(f"split of {ids.size} tokens is too short for seq_len {seq_len}")
    starts = rng.integers(0, ids.size - seq_len, size=batch)
    idx = starts[:, None] + np.arange(seq_len + 1)[None, :]
    win = ids[idx]
    return Batch(win[:, :-1], win[:, 1:])


def eval_windows(ids: np.ndarray, seq_len: int, max_windows: int | None = None) -> Batch:
    """Non-overlapping windows with stride ``seq_len``."""
    n = (ids.size - 1) // seq_len
    if max_windows is not None:
        n = min(n, max_windows)
    if n <= 0:
        raise ValueError("split too short for a single evaluation window")
    idx = np.arange(n)[:, None] * seq_len + np.arange(seq_len + 1)[None, :]
    win = ids[idx]
    return Batch(win[:, :-1], win[:, 1:])


def next_token_loss(logits: ad.Tensor, targets: np.ndarray) -> ad.Tensor:
    """Mean cross-entropy of ``targets`` under ``logits`` ([..., V])."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ad.ShapeError(f"next_token_loss: logits {logits.shape} vs targets {targets.shape}")
    V = logits.shape[-1]
    logp = ad.log_softmax(logits.reshape(-1, V), axis=-1)
    picked = ad.index(logp, (np.arange(targets.size), targets.reshape(-1)))
    return -(picked.sum() / targets.size)


def perplexity(base: BaseWeights, module: LightweightModule | None, ids: np.ndarray, seq_len: int,
               max_windows: int | None = None, batch: int = 16) -> float:
    """``exp`` of the mean next-token loss over non-overlapping windows (deterministic masks)."""
    b = eval_windows(ids, seq_len, max_windows)
    total, count = 0.0, 0
    with ad.no_grad():
        for s in range(0, b.inputs.shape[0], batch):
            x, y = b.inputs[s:s + batch], b.targets[s:s + batch]
            out = forward(base, module, x, "deterministic")
            total += next_token_loss(out.logits, y).item() * y.size
            count += y.size
    return math.exp(total / count)


def generate(base: BaseWeights, module: LightweightModule | None, prompt, max_new: int) -> np.ndarray:
    """Greedy decoding (ties to the lowest id); the context is cropped to the last ``context_len`` ids."""
    seq = [int(t) for t in prompt]
    ctx = base.cfg.context_len
    with ad.no_grad():
        for _ in range(max_new):
            window = np.asarray(seq[-ctx:], dtype=np.int64)[None, :]
            logits = forward(base, module, window, "deterministic").logits.data[0, -1]
            seq.append(int(np.argmax(logits)))
    return np.asarray(seq, dtype=np.int64)
