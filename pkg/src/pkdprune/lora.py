"""Low-rank adapters over frozen projections.

Projections are stored input-major (``y = x @ W`` with ``W`` of shape
``[n_in, n_out]``), so the adapter path is ``x @ A @ B`` with ``A`` of shape
``[n_in, rank]`` and ``B`` of shape ``[rank, n_out]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DTYPE, ShapeError, Tensor, matmul, mul

# projection names adapted in every layer
TARGETS = ("wq", "wk", "wv", "wo", "wu", "wg", "wd")


@dataclass
class LoraPair:
    a: Tensor
    b: Tensor

    @property
    def rank(self) -> int:
        return self.a.shape[1]


@dataclass
class LoraSet:
    """Adapters keyed by ``(layer, target)``; ``scale`` multiplies the low-rank path."""

    pairs: dict[tuple[int, str], LoraPair]
    rank: int
    scale: float = 1.0
    targets: tuple[str, ...] = field(default=TARGETS)

    @classmethod
    def init(cls, shapes: dict[tuple[int, str], tuple[int, int]], rank: int,
             rng: np.random.Generator, scale: float = 1.0, std: float = 0.02,
             requires_grad: bool = True) -> LoraSet:
        pairs = {}
        for key in sorted(shapes):
            n_in, n_out = shapes[key]
            if rank > min(n_in, n_out):
                raise ValueError(f"lora rank {rank} exceeds min dimension of {key} {shapes[key]}")
            a = Tensor(rng.normal(0.0, std, size=(n_in, rank)), requires_grad=requires_grad)
            b = Tensor(np.zeros((rank, n_out), dtype=DTYPE), requires_grad=requires_grad)
            pairs[key] = LoraPair(a, b)
        targets = tuple(t for t in TARGETS if any(k[1] == t for k in shapes))
        return cls(pairs=pairs, rank=rank, scale=scale, targets=targets)

    def parameters(self) -> list[Tensor]:
        out = []
        for key in sorted(self.pairs):
            out.extend((self.pairs[key].a, self.pairs[key].b))
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def get(self, layer: int, target: str) -> LoraPair | None:
        return self.pairs.get((layer, target))


def apply(w: Tensor, pair: LoraPair | None, x: Tensor, scale: float = 1.0) -> Tensor:
    """``x @ W + scale * (x @ A) @ B``; only ``A`` and ``B`` carry gradients."""
    y = matmul(x, w)
    if pair is None:
        return y
    if pair.a.shape[0] != w.shape[0] or pair.b.shape[1] != w.shape[1]:
        raise ShapeError(f"lora apply: pair {pair.a.shape}/{pair.b.shape} does not fit W {w.shape}")
    low = matmul(matmul(x, pair.a), pair.b)
    if scale != 1.0:
        low = mul(low, scale)
    return y + low


def merge(w: np.ndarray, pair: LoraPair | None, scale: float = 1.0) -> np.ndarray:
    """Dense weight equivalent to ``apply``."""
    if pair is None:
        return np.array(w, dtype=DTYPE)
    return w + scale * (pair.a.data @ pair.b.data)
