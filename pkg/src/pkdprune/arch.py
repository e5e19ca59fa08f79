"""Architecture dimensions of the decoder-only transformer."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class ModelConfig:
    """Dense (unpruned) or sliced architecture.

    A sliced model carries per-layer ``head_counts`` / ``int_dims`` and keeps
    ``norm_dim`` at the dense hidden width; for a dense config those are
    ``None`` and ``d_model == n_head * d_head`` must hold.
    """

    n_layer: int = 4
    d_model: int = 128
    n_head: int = 4
    d_head: int = 32
    d_int: int = 344
    vocab_size: int = 256
    context_len: int = 256
    head_counts: tuple[int, ...] | None = None
    int_dims: tuple[int, ...] | None = None
    norm_dim: int | None = None

    def __post_init__(self):
        for name in ("n_layer", "d_model", "n_head", "d_head", "d_int", "vocab_size", "context_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive, got {getattr(self, name)}")
        if not self.is_sliced and self.d_model != self.n_head * self.d_head:
            raise ValueError(
                f"ModelConfig: d_model ({self.d_model}) must equal n_head*d_head "
                f"({self.n_head}*{self.d_head})")
        for name in ("head_counts", "int_dims"):
            v = getattr(self, name)
            if v is not None and len(v) != self.n_layer:
                raise ValueError(f"ModelConfig.{name} must have n_layer={self.n_layer} entries")

    @property
    def is_sliced(self) -> bool:
        return self.head_counts is not None or self.int_dims is not None or self.norm_dim is not None

    def heads(self, layer: int) -> int:
        return self.n_head if self.head_counts is None else self.head_counts[layer]

    def ints(self, layer: int) -> int:
        return self.d_int if self.int_dims is None else self.int_dims[layer]

    @property
    def rms_dim(self) -> int:
        return self.d_model if self.norm_dim is None else self.norm_dim

    def fingerprint(self) -> bytes:
        """16-byte digest identifying the architecture (stored in container headers)."""
        text = repr(sorted(asdict(self).items())).encode()
        return hashlib.blake2b(text, digest_size=16).digest()


def maskable_param_count(cfg: ModelConfig) -> int:
    """Number of attention and FFN weights that masks can remove (embeddings excluded)."""
    L, d, dh = cfg.n_layer, cfg.d_model, cfg.d_head
    return 4 * dh * L * cfg.n_head * d + 3 * L * cfg.d_int * d
