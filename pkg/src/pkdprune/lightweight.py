"""The lightweight module set: masks plus LoRA adapters over one frozen base."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .arch import ModelConfig
from .autodiff import Tensor
from .l0 import MaskSet
from .lora import TARGETS, LoraPair, LoraSet


def lora_shapes(cfg: ModelConfig, targets=TARGETS) -> dict[tuple[int, str], tuple[int, int]]:
    d, di = cfg.d_model, cfg.d_int
    hd = cfg.n_head * cfg.d_head
    base = {"wq": (d, hd), "wk": (d, hd), "wv": (d, hd), "wo": (hd, d),
            "wu": (d, di), "wg": (d, di), "wd": (di, d)}
    return {(layer, t): base[t] for layer in range(cfg.n_layer) for t in targets}


@dataclass
class LightweightModule:
    masks: MaskSet
    lora: LoraSet
    sparsity_key: float | None = None
    step: int = -1
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator, rank: int = 1, scale: float = 1.0,
             init_logalpha: float = 2.5, beta: float = 2.0 / 3.0, l: float = -0.1, r: float = 1.1,
             targets=TARGETS) -> LightweightModule:
        masks = MaskSet.init(cfg, init_logalpha=init_logalpha, beta=beta, l=l, r=r)
        lora = LoraSet.init(lora_shapes(cfg, targets), rank, rng, scale=scale)
        return cls(masks, lora)

    def parameters(self) -> list[Tensor]:
        return self.masks.parameters() + self.lora.parameters()

    def num_params(self) -> int:
        return self.masks.num_params() + self.lora.num_params()

    def frozen_copy(self) -> LightweightModule:
        """Deep copy with gradients disabled (a teacher snapshot)."""
        def c(t: Tensor) -> Tensor:
            return Tensor(t.data.copy(), requires_grad=False)

        m = self.masks
        masks = MaskSet(c(m.logalpha_head), c(m.logalpha_int), c(m.logalpha_hid), beta=m.beta, l=m.l, r=m.r)
        pairs = {k: LoraPair(c(p.a), c(p.b)) for k, p in self.lora.pairs.items()}
        lora = LoraSet(pairs, self.lora.rank, self.lora.scale, self.lora.targets)
        return LightweightModule(masks, lora, self.sparsity_key, self.step, dict(self.meta))

    def trainable_copy(self) -> LightweightModule:
        out = self.frozen_copy()
        for p in out.parameters():
            p.requires_grad = True
        return out
