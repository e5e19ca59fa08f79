"""Hard-concrete structural gates, expected-size accounting and the sparsity Lagrangian."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .arch import ModelConfig, maskable_param_count
from .autodiff import Tensor

log = logging.getLogger(__name__)

# logit used to pin a gate fully open / closed after binarization
HARD_LOGIT = 40.0


@dataclass
class MaskValues:
    """Gate values ``z`` for the three structure groups."""

    head: Tensor  # [L, n_head]
    int: Tensor  # [L, d_int]
    hid: Tensor  # [d_model]

    def numpy(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.head.data, self.int.data, self.hid.data


@dataclass
class MaskSet:
    logalpha_head: Tensor
    logalpha_int: Tensor
    logalpha_hid: Tensor
    beta: float = 2.0 / 3.0
    l: float = -0.1
    r: float = 1.1

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"MaskSet: beta must be > 0, got {self.beta}")
        if not (self.l < 0 and self.r > 1):
            raise ValueError(f"MaskSet: need l < 0 < 1 < r, got l={self.l}, r={self.r}")

    @classmethod
    def init(cls, cfg: ModelConfig, init_logalpha: float = 2.5, beta: float = 2.0 / 3.0,
             l: float = -0.1, r: float = 1.1, requires_grad: bool = True) -> MaskSet:
        def full(shape):
            return Tensor(np.full(shape, init_logalpha), requires_grad=requires_grad)

        return cls(full((cfg.n_layer, cfg.n_head)), full((cfg.n_layer, cfg.d_int)),
                   full((cfg.d_model,)), beta=beta, l=l, r=r)

    def parameters(self) -> list[Tensor]:
        return [self.logalpha_head, self.logalpha_int, self.logalpha_hid]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def check_shapes(self, cfg: ModelConfig) -> None:
        want = {"logalpha_head": (cfg.n_layer, cfg.n_head), "logalpha_int": (cfg.n_layer, cfg.d_int),
                "logalpha_hid": (cfg.d_model,)}
        for name, shape in want.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ad.ShapeError(f"MaskSet.{name} has shape {got}, config expects {shape}")


@dataclass
class LagrangianState:
    lambda1: Tensor
    lambda2: Tensor
    t_current: float = 0.0

    @classmethod
    def init(cls) -> LagrangianState:
        return cls(Tensor(0.0, requires_grad=True), Tensor(0.0, requires_grad=True))

    def parameters(self) -> list[Tensor]:
        return [self.lambda1, self.lambda2]


def _gate(m: MaskSet, logalpha: Tensor, noise: np.ndarray | None) -> Tensor:
    pre = logalpha if noise is None else ad.add(logalpha, noise)
    s = ad.sigmoid(pre)
    stretched = ad.add(ad.mul(s, m.r - m.l), m.l)
    return ad.clamp(stretched, 0.0, 1.0)


def _logistic_noise(u: np.ndarray, beta: float) -> np.ndarray:
    return np.log(u / (1.0 - u)) / beta


def sample_masks(m: MaskSet, rng: np.random.Generator | None = None,
                 u: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None) -> MaskValues:
    """Draw hard-concrete gates with fresh uniform noise per entry.

    ``u`` may be supplied explicitly (one array per group) for testing.
    """
    params = m.parameters()
    if u is None:
        if rng is None:
            raise ValueError("sample_masks needs an rng or explicit noise")
        tiny = 1e-6
        u = tuple(rng.uniform(tiny, 1.0 - tiny, size=p.shape) for p in params)
    zs = [_gate(m, p, _logistic_noise(np.asarray(uu, dtype=ad.DTYPE), m.beta)) for p, uu in zip(params, u)]
    return MaskValues(*zs)


def deterministic_masks(m: MaskSet) -> MaskValues:
    """Noise-free gates (the ``u = 0.5`` path)."""
    return MaskValues(*[_gate(m, p, None) for p in m.parameters()])


def straight_through_masks(m: MaskSet) -> MaskValues:
    """Deterministic gate values whose gradient ignores the clamp.

    The forward value equals ``deterministic_masks``; the backward pass uses
    the derivative of the unclamped stretched sigmoid, so saturated gates
    still feel the sparsity constraint.
    """
    out = []
    for p in m.parameters():
        stretched = ad.add(ad.mul(ad.sigmoid(p), m.r - m.l), m.l)
        hard = np.clip(stretched.data, 0.0, 1.0)
        out.append(ad.add(stretched, Tensor(hard - stretched.data)))
    return MaskValues(*out)


def open_probability(m: MaskSet) -> MaskValues:
    """``P(z > 0)`` per gate, the closed-form expected L0 norm of the hard-concrete gate.

    With the noise scaled as ``logalpha + L / beta`` the gate opens when
    ``L > beta * (log(-l/r) - logalpha)``.
    """
    shift = np.log(-m.l / m.r)
    return MaskValues(*[ad.sigmoid(ad.mul(ad.sub(p, shift), m.beta)) for p in m.parameters()])


def remaining_ratio(z: MaskValues, cfg: ModelConfig) -> Tensor:
    """Fraction of maskable weights kept, in factored form.

    For binary gates the numerator is an exact integer, so the result equals
    ``surviving / M`` bit for bit.
    """
    M = maskable_param_count(cfg)
    hid = z.hid.sum()
    inner = ad.add(ad.mul(z.head.sum(), 4.0 * cfg.d_head), ad.mul(z.int.sum(), 3.0))
    return ad.mul(inner, hid) / M


def achieved_sparsity(z: MaskValues, cfg: ModelConfig) -> Tensor:
    return ad.sub(1.0, remaining_ratio(z, cfg))


def deterministic_sparsity(m: MaskSet, cfg: ModelConfig) -> float:
    with ad.no_grad():
        return achieved_sparsity(deterministic_masks(m), cfg).item()


def lagrangian_loss(s_hat: Tensor, lag: LagrangianState, target: float | None = None) -> Tensor:
    """``lambda1 * (s - t) + lambda2 * (s - t)**2`` with ``s`` the achieved sparsity."""
    t = lag.t_current if target is None else target
    diff = ad.sub(s_hat, t)
    return ad.add(ad.mul(lag.lambda1, diff), ad.mul(lag.lambda2, ad.square(diff)))


# ------------------------------------------------------------------ binarize


@dataclass
class BinaryMasks:
    head: np.ndarray  # bool [L, n_head]
    int: np.ndarray  # bool [L, d_int]
    hid: np.ndarray  # bool [d_model]

    def surviving(self, cfg: ModelConfig) -> int:
        return (4 * cfg.d_head * int(self.head.sum()) + 3 * int(self.int.sum())) * int(self.hid.sum())

    def sparsity(self, cfg: ModelConfig) -> float:
        return 1.0 - self.surviving(cfg) / maskable_param_count(cfg)

    def to_maskset(self, like: MaskSet) -> MaskSet:
        def pin(b):
            return Tensor(np.where(b, HARD_LOGIT, -HARD_LOGIT), requires_grad=False)

        return MaskSet(pin(self.head), pin(self.int), pin(self.hid), beta=like.beta, l=like.l, r=like.r)


def binary_from_maskset(m: MaskSet) -> BinaryMasks:
    """Read binary gates from a MaskSet whose deterministic values are exactly 0 or 1."""
    with ad.no_grad():
        zh, zi, zd = deterministic_masks(m).numpy()
    for name, z in (("head", zh), ("int", zi), ("hid", zd)):
        if not np.all((z == 0.0) | (z == 1.0)):
            raise ValueError(f"masks are not binary (group {name}); binarize first")
    return BinaryMasks(zh == 1.0, zi == 1.0, zd == 1.0)


def binarize(m: MaskSet, target: float, cfg: ModelConfig, tol: float = 0.01) -> tuple[MaskSet, BinaryMasks]:
    """Threshold deterministic gates at 0.5, then greedily repair the sparsity.

    If the thresholded sparsity misses ``target`` by more than ``tol``, gates
    closest to 0.5 are flipped (ties by lowest flat index over the
    concatenation head | int | hid).  A flip that would overshoot the band on
    the other side is skipped, and the last hidden channel is never removed.
    """
    if not 0.0 <= target < 1.0:
        raise ValueError(f"binarize: infeasible target sparsity {target} (would remove every hidden channel)")
    with ad.no_grad():
        zh, zi, zd = deterministic_masks(m).numpy()
    z_flat = np.concatenate([zh.reshape(-1), zi.reshape(-1), zd.reshape(-1)])
    keep = z_flat >= 0.5
    n_head, n_int = zh.size, zi.size
    M = maskable_param_count(cfg)

    def sparsity_of(k: np.ndarray) -> float:
        heads = int(k[:n_head].sum())
        ints = int(k[n_head:n_head + n_int].sum())
        hid = int(k[n_head + n_int:].sum())
        return 1.0 - (4 * cfg.d_head * heads + 3 * ints) * hid / M

    if not keep[n_head + n_int:].any():
        # keep the most open hidden channel so the model stays well defined
        keep[n_head + n_int + int(np.argmax(zd))] = True

    s = sparsity_of(keep)
    if abs(s - target) > tol:
        need_more = s < target
        order = np.lexsort((np.arange(z_flat.size), np.abs(z_flat - 0.5)))
        for idx in order:
            if keep[idx] != need_more:
                continue
            if need_more and idx >= n_head + n_int and keep[n_head + n_int:].sum() <= 1:
                continue
            keep[idx] = not keep[idx]
            s_new = sparsity_of(keep)
            overshoot = s_new > target + tol if need_more else s_new < target - tol
            if overshoot:
                keep[idx] = not keep[idx]
                continue
            s = s_new
            if abs(s - target) <= tol:
                break
        else:
            log.warning("binarize: could not reach target %.4f within %.4f (got %.4f)", target, tol, s)

    if not keep[n_head + n_int:].any():
        raise ValueError("binarize: all hidden channels pruned")
    binary = BinaryMasks(keep[:n_head].reshape(zh.shape), keep[n_head:n_head + n_int].reshape(zi.shape),
                         keep[n_head + n_int:].reshape(zd.shape))
    return binary.to_maskset(m), binary
