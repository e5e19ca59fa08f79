"""AdamW with per-group learning rates and gradient-ascent groups."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One decoupled-weight-decay Adam update, in place on ``param`` and ``state``."""
    state.t += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    if weight_decay:
        param -= lr * weight_decay * param
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class ParamGroup:
    params: list[Tensor]
    lr: float
    weight_decay: float = 0.0
    ascent: bool = False
    clip: bool = True


@dataclass
class AdamW:
    groups: list[ParamGroup]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = 1.0
    skipped: int = 0
    _state: dict[int, AdamState] = field(default_factory=dict)

    def state_size(self) -> int:
        """Number of stored moment values (two per trained parameter)."""
        return 2 * sum(p.size for g in self.groups for p in g.params)

    def step(self) -> bool:
        """Apply one update; returns False (and skips) if any gradient is non-finite."""
        grads = []
        for g in self.groups:
            grads.append([p.grad if p.grad is not None else np.zeros_like(p.data) for p in g.params])
        if not all(np.all(np.isfinite(gr)) for gl in grads for gr in gl):
            self.skipped += 1
            log.warning("non-finite gradient; optimizer step skipped")
            return False
        scale = 1.0
        if self.max_grad_norm is not None:
            sq = sum(float(np.sum(gr * gr)) for g, gl in zip(self.groups, grads) if g.clip for gr in gl)
            norm = np.sqrt(sq)
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / (norm + 1e-12)
        for g, gl in zip(self.groups, grads):
            if g.lr == 0.0:
                continue
            for p, gr in zip(g.params, gl):
                if g.clip and scale != 1.0:
                    gr = gr * scale
                if g.ascent:
                    gr = -gr
                st = self._state.get(id(p))
                if st is None:
                    st = self._state[id(p)] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
                adamw_step(p.data, gr, st, g.lr, self.beta1, self.beta2, self.eps, g.weight_decay)
        return True
