"""Decoupling, contrastive and segmentation losses plus their gated sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .semantics import SemanticVector, unit_rows
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1
    tau: float = 0.5
    total_steps: int = 2000

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")

    def contrastive_active(self, step: int) -> bool:
        return step >= self.tau * self.total_steps


def decoupling_loss(w: Tensor, class_index: int) -> Tensor:
    """log(1 + exp(-w . y)) for the one-hot label y of ``class_index``."""
    n = w.shape[0]
    if not 0 <= class_index < n:
        raise IndexError(f"class_index {class_index} outside [0, {n})")
    onehot = np.zeros(n)
    onehot[class_index] = 1.0
    score = T.sum_(w * Tensor(onehot))
    return T.log(1.0 + T.exp(-score))


def contrastive_loss(v_s: SemanticVector, v_q: SemanticVector) -> Tensor:
    """exp(1 + S_off - S_diag) over absolute cosines of support/query sub-vectors.

    S_off sums |cos| over the B(B-1) ordered pairs of different groups and
    S_diag over the B matched pairs.
    """
    if (v_s.groups, v_s.group_dim) != (v_q.groups, v_q.group_dim):
        raise T.ShapeError("support and query semantic vectors differ in layout")
    s = unit_rows(v_s.matrix())
    q = unit_rows(v_q.matrix())
    cos = T.abs_(T.matmul(s, T.transpose(q)))
    eye = Tensor(np.eye(v_s.groups))
    s_diag = T.sum_(cos * eye)
    s_off = T.sum_(cos) - s_diag
    return T.exp(1.0 + s_off - s_diag)


def segmentation_loss(logits: Tensor, mask) -> Tensor:
    """Mean per-pixel two-class cross-entropy with logits H×W×2."""
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if logits.data.ndim != 3 or logits.shape[2] != 2 or logits.shape[:2] != mask.shape:
        raise T.ShapeError(f"logits {logits.shape} vs mask {mask.shape}")
    if not np.isin(mask, (0.0, 1.0)).all():
        raise T.DomainError("mask must be binary")
    onehot = Tensor(np.stack([1.0 - mask, mask], axis=-1))
    picked = T.sum_(T.log_softmax(logits, axis=-1) * onehot, axes=2)
    return -T.mean(picked)


def total_loss(l_dec, l_seg, l_con, weights: LossWeights, step: int) -> Tensor:
    """alpha*L_dec + beta*L_seg (+ gamma*L_con once step >= tau*total_steps).

    ``l_con`` may be None while gated off.
    """
    if not 0 <= step < weights.total_steps:
        raise ValueError(f"step {step} outside [0, {weights.total_steps})")
    out = T.as_tensor(l_dec) * weights.alpha + T.as_tensor(l_seg) * weights.beta
    if weights.contrastive_active(step):
        if l_con is None:
            raise ValueError("contrastive term is active but l_con was not computed")
        out = out + T.as_tensor(l_con) * weights.gamma
    return out
