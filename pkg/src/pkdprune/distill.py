"""Distillation objective: output KL, hidden-state MSE and the sparsity term."""
from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class DistillConfig:
    alpha1: float = 0.01  # hidden-state MSE weight
    alpha2: float = 1.0  # Lagrangian weight
    kl_direction: str = "student_teacher"

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError(f"DistillConfig: weights must be nonnegative, got {self.alpha1}, {self.alpha2}")
        if self.kl_direction not in ("student_teacher", "teacher_student"):
            raise ValueError(f"DistillConfig: unknown kl_direction {self.kl_direction!r}")


def kl_loss(student_logits: Tensor, teacher_logits: Tensor, direction: str = "student_teacher") -> Tensor:
    """Per-token KL divergence averaged over batch and positions (temperature 1).

    The default ``student_teacher`` computes ``KL(p_student || p_teacher)``.
    Teacher logits are treated as constants.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(f"kl_loss: shapes differ {student_logits.shape} vs {teacher_logits.shape}")
    n_tokens = student_logits.data.size // student_logits.shape[-1]
    log_s = ad.log_softmax(student_logits, axis=-1)
    log_t = ad.log_softmax(teacher_logits.detach(), axis=-1)
    if direction == "student_teacher":
        per = ad.mul(ad.exp(log_s), ad.sub(log_s, log_t))
    else:
        per = ad.mul(ad.exp(log_t), ad.sub(log_t, log_s))
    return per.sum() / n_tokens


def layer_loss(student_hiddens: list[Tensor], teacher_hiddens: list[Tensor]) -> Tensor:
    """Sum over layers of the mean squared difference of hidden states."""
    if len(student_hiddens) != len(teacher_hiddens):
        raise ShapeError(f"layer_loss: {len(student_hiddens)} student vs {len(teacher_hiddens)} teacher layers")
    total: Tensor | None = None
    for hs, ht in zip(student_hiddens, teacher_hiddens):
        if hs.shape != ht.shape:
            raise ShapeError(f"layer_loss: hidden shapes differ {hs.shape} vs {ht.shape}")
        term = ad.square(ad.sub(hs, ht.detach())).mean()
        total = term if total is None else ad.add(total, term)
    return total if total is not None else Tensor(0.0)


def total_loss(kl, layer, l0, cfg: DistillConfig) -> Tensor:
    return ad.add(ad.add(kl, ad.mul(layer, cfg.alpha1)), ad.mul(l0, cfg.alpha2))
