"""Contrastive head losses, their analytical gradient, and the combined objective.

All losses follow the summed-over-anchors convention: for a batch of ``2N``
projection rows ``z`` and a positive set ``P``

    L = sum_i  -1/|P(i)|  sum_{p in P(i)}  w_ip * log softmax_{a != i}(z_i.z_a / tau)[p]

with ``w = 1`` for level heads and ``w = s_ip`` (Jaccard) for the global head.
Anchors without positives contribute zero loss and zero gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from mlcl import kernels
from mlcl.labels import PositiveSet


@dataclass(frozen=True)
class Level:
    index: int


@dataclass(frozen=True)
class Global:
    threshold: float = 0.7


@dataclass(frozen=True)
class HeadConfig:
    criterion: Union[Level, Global]
    temperature: float
    weight: float

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not self.weight >= 0:
            raise ValueError(f"head weight must be non-negative, got {self.weight}")
        if isinstance(self.criterion, Global) and not 0.0 <= self.criterion.threshold < 1.0:
            raise ValueError(
                f"global threshold must lie in [0, 1), got {self.criterion.threshold}"
            )

    @property
    def is_global(self) -> bool:
        return isinstance(self.criterion, Global)

    @property
    def name(self) -> str:
        if self.is_global:
            return "global"
        return f"level_{self.criterion.index}"


@dataclass
class LossReport:
    per_head: list = field(default_factory=list)  # [(head id, value)]
    ce: Optional[float] = None
    total: float = 0.0

    def to_dict(self) -> dict:
        out = {name: value for name, value in self.per_head}
        if self.ce is not None:
            out["ce"] = self.ce
        out["total"] = self.total
        return out


def _as_batch(z, pos: PositiveSet):
    z = np.ascontiguousarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[1] < 1:
        raise ValueError(f"projection batch must be (2N >= 2, d >= 1), got {z.shape}")
    if pos.mask.shape != (z.shape[0], z.shape[0]):
        raise ValueError(
            f"mask shape {pos.mask.shape} does not match batch size {z.shape[0]}"
        )
    if not np.all(np.isfinite(z)):
        raise ValueError("projection batch contains non-finite values")
    return z


def _terms(z, pos: PositiveSet, tau: float, weighted: bool):
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = _as_batch(z, pos)
    mask = np.ascontiguousarray(pos.mask, dtype=np.bool_)
    if weighted:
        if pos.weights is None:
            raise ValueError("global head loss needs Jaccard weights on the positive set")
        weights = np.ascontiguousarray(pos.weights, dtype=np.float64)
    else:
        weights = np.ones(mask.shape)
    return z, kernels.contrastive_terms(z, mask, weights, float(tau))


def per_anchor_loss(z, pos: PositiveSet, tau: float, weighted: bool = False) -> np.ndarray:
    """The per-anchor terms ``L^i``; they sum to :func:`head_loss`."""
    _, (per_anchor, _) = _terms(z, pos, tau, weighted)
    return per_anchor


def head_loss(z, pos: PositiveSet, tau: float) -> float:
    return float(per_anchor_loss(z, pos, tau).sum())


def global_head_loss(z, pos: PositiveSet, tau: float) -> float:
    return float(per_anchor_loss(z, pos, tau, weighted=True).sum())


def loss_and_gradient(z, pos: PositiveSet, tau: float, weighted: bool = False):
    """Loss value and its full-batch gradient with respect to every row of ``z``.

    Each anchor ``t`` moves ``z_t`` and every ``z_i`` it contrasts against, so
    the gradient collects both directions: ``-(1/tau) (C + C^T) z`` with ``C``
    the logit coefficients from the kernel. For level masks (``|P(t)| = |P(i)|``
    whenever ``t`` is a positive of ``i``) this equals

        -(2/tau) [ mean_{p in P(i)} z_p - sum_{a != i} z_a (S_ai + S_ia) / 2 ].
    """
    z, (per_anchor, coef) = _terms(z, pos, tau, weighted)
    grad = -((coef + coef.T) @ z) / tau
    return float(per_anchor.sum()), grad


def head_loss_gradient(z, pos: PositiveSet, tau: float, weighted: bool = False) -> np.ndarray:
    return loss_and_gradient(z, pos, tau, weighted)[1]


def relative_similarity(z, tau: float) -> np.ndarray:
    """Row softmax of ``z_m.z_n / tau`` over ``n != m``; zero diagonal."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("projection batch contains non-finite values")
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    n = z.shape[0]
    logits = (z @ z.T) / tau
    np.fill_diagonal(logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def _limit_inputs(z, pos: PositiveSet):
    z = _as_batch(z, pos)
    counts = pos.mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError(f"anchors {np.flatnonzero(counts == 0).tolist()} have no positives")
    sims = z @ z.T
    return z, sims, counts


def tau_zero_limit_form(z, pos: PositiveSet) -> np.ndarray:
    """``|P(i)| z_i.z_i^max - sum_p z_i.z_p`` per anchor.

    ``z_i^max`` maximises ``z_i.z_a`` over all ``a != i``; ties go to the
    lowest index. ``tau |P(i)| L^i`` approaches this value as ``tau -> 0+``.
    """
    _, sims, counts = _limit_inputs(z, pos)
    n = sims.shape[0]
    off = np.where(np.eye(n, dtype=bool), -np.inf, sims)
    hardest = off[np.arange(n), np.argmax(off, axis=1)]
    pos_sum = np.where(pos.mask, sims, 0.0).sum(axis=1)
    return counts * hardest - pos_sum


def tau_inf_limit_form(z, pos: PositiveSet):
    """Large-temperature expansion ``|P(i)| L^i ~ const_i + coef_i / tau``.

    Returns ``(const, coef)`` with ``const = |P(i)| log(2N-1)`` and
    ``coef = |P(i)| mean_{a != i} z_i.z_a - sum_p z_i.z_p``.
    """
    _, sims, counts = _limit_inputs(z, pos)
    n = sims.shape[0]
    off = ~np.eye(n, dtype=bool)
    mean_all = np.where(off, sims, 0.0).sum(axis=1) / (n - 1)
    pos_sum = np.where(pos.mask, sims, 0.0).sum(axis=1)
    const = counts * math.log(n - 1)
    return const, counts * mean_all - pos_sum


def cross_entropy(logits, targets):
    """Mean softmax cross-entropy and its gradient with respect to ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    B, C = logits.shape
    if targets.shape != (B,):
        raise ValueError(f"targets shape {targets.shape} does not match {B} rows")
    if np.any(targets < 0) or np.any(targets >= C):
        raise ValueError(f"targets must lie in [0, {C})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(B)
    value = float(-log_p[rows, targets].mean())
    grad = np.exp(log_p)
    grad[rows, targets] -= 1.0
    return value, grad / B


def combined_loss(heads: Sequence, ce: Optional[float] = None) -> float:
    """Weighted head losses, plus ``(1 - sum alpha) * ce`` when ``ce`` is given.

    ``heads`` is a sequence of ``(HeadConfig, loss value)`` pairs. Without a
    cross-entropy term the weights must sum to one; with it they must not
    exceed one.
    """
    alphas = [cfg.weight for cfg, _ in heads]
    total_alpha = math.fsum(alphas)
    if ce is None:
        if abs(total_alpha - 1.0) > 1e-9:
            raise ValueError(
                f"head weights must sum to 1 without a cross-entropy term, got {total_alpha}"
            )
    elif total_alpha > 1.0 + 1e-9:
        raise ValueError(f"head weights sum to {total_alpha} > 1; no room for cross-entropy")
    total = math.fsum(cfg.weight * value for cfg, value in heads)
    if ce is not None:
        total += (1.0 - total_alpha) * ce
    return total


def rescale_for_ce(heads: Sequence[HeadConfig], ce_weight: float) -> list:
    """Scale head weights so they sum to ``1 - ce_weight`` exactly.

    Lets a cross-entropy share be pinned when the listed head weights do not
    leave exactly that share over (e.g. 7 x 0.03 + 0.1 = 0.31 with CE 0.7).
    """
    if not 0.0 <= ce_weight <= 1.0:
        raise ValueError(f"cross-entropy weight must lie in [0, 1], got {ce_weight}")
    total = math.fsum(h.weight for h in heads)
    target = 1.0 - ce_weight
    if total == 0.0:
        if target > 0.0:
            raise ValueError("cannot rescale all-zero head weights to a positive sum")
        return list(heads)
    return [HeadConfig(h.criterion, h.temperature, h.weight * target / total) for h in heads]
