"""Loss terms and their weighted combination.

All pixel losses are sums, not means (the learning rate absorbs scale); the
log records per-pixel means separately for readability. Masked variants sum
over the masked pixels only and contribute exactly zero when the mask is
empty. Anchors enter the distance loss as detached constants: the stage
freezes them, so gradients flow into features only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .anchors import AnchorError, AnchorSet
from .tensor import (Tensor, bce_with_logits, gather_rows, log_clamped, mul,
                     neg, reduce_sum, scalar, sub, take_per_row, tensor)


def _as_label_indices(labels, P: int, C: int) -> np.ndarray:
    """Accept [P] index labels or [P, C] one-hot rows; return int64 indices."""
    arr = np.asarray(labels)
    if arr.ndim == 2:
        if arr.shape != (P, C):
            raise ValueError(f"one-hot labels must be [{P} x {C}], got {arr.shape}")
        return np.argmax(arr, axis=1).astype(np.int64)
    if arr.shape != (P,):
        raise ValueError(f"labels must have {P} entries, got {arr.shape}")
    return arr.astype(np.int64)


def _mask_indices(mask, P: int) -> np.ndarray:
    if mask is None:
        return np.arange(P, dtype=np.int64)
    m = np.asarray(mask)
    if m.shape != (P,):
        raise ValueError(f"mask must have {P} entries, got {m.shape}")
    return np.nonzero(m.astype(bool))[0].astype(np.int64)


def ce_loss(probabilities: Tensor, labels, mask=None) -> Tensor:
    """Cross entropy summed over masked pixels: -sum log p[i, label_i].

    Labels may be indices or one-hot rows; only masked entries are read, so
    inactive pixels may carry the -1 placeholder. Probabilities are clamped
    away from zero inside the log. An empty mask gives exactly zero.
    """
    P, C = probabilities.shape
    idx = _mask_indices(mask, P)
    if idx.size == 0:
        return scalar(0.0)
    labs = _as_label_indices(labels, P, C)[idx]
    if labs.min() < 0 or labs.max() >= C:
        raise ValueError(f"label {int(labs.max() if labs.max() >= C else labs.min())} "
                         f"out of range for {C} categories")
    picked = take_per_row(log_clamped(gather_rows(probabilities, idx)), labs)
    return neg(reduce_sum(picked))


def dis_loss(features: Tensor, labels, mask, anchor_set: AnchorSet) -> Tensor:
    """Squared distance to the labeled anchor, summed over masked pixels.

    The anchor rows are constants: the gradient with respect to a masked
    feature row is exactly 2 * (feature - anchor). Masked pixels must point
    at valid anchors. An empty mask gives exactly zero.
    """
    P, F = features.shape
    if F != anchor_set.F:
        raise ValueError(f"features are {F}-dim but anchors are {anchor_set.F}-dim")
    idx = _mask_indices(mask, P)
    if idx.size == 0:
        return scalar(0.0)
    labs = _as_label_indices(labels, P, anchor_set.C)[idx]
    if labs.min() < 0 or labs.max() >= anchor_set.C:
        raise ValueError(f"label out of range for {anchor_set.C} categories")
    bad = ~anchor_set.valid[labs]
    if bad.any():
        c = int(labs[np.argmax(bad)])
        raise AnchorError(f"masked pixel labeled {c}, but that category has no anchor")
    rows = gather_rows(features, idx)
    diff = sub(rows, tensor(anchor_set.anchors[labs]))
    return reduce_sum(mul(diff, diff))


@dataclass
class LossTerms:
    """Scalar tensors for each objective component; None means skipped.

    A term is skipped (never built) when its switch is off, its weight is
    zero, or its mask is empty; a skipped term contributes exactly nothing
    to the total, bit for bit.
    """

    ce_source: Tensor
    dis_source: Tensor | None = None
    ce_target_anchor: Tensor | None = None
    dis_target: Tensor | None = None
    ce_target_prob: Tensor | None = None


def combine(terms: LossTerms, lambda_dis: float, lambda_ce: float) -> Tensor:
    """total = ce_source + lambda_dis*(dis terms) + lambda_ce*(target CE terms).

    Groups with weight zero or with no surviving terms are omitted from the
    graph entirely, so disabling them reduces the objective exactly to the
    remaining terms.
    """
    total = terms.ce_source
    dis = [t for t in (terms.dis_source, terms.dis_target) if t is not None]
    if lambda_dis != 0.0 and dis:
        group = dis[0] if len(dis) == 1 else dis[0] + dis[1]
        total = total + scalar(lambda_dis) * group
    ces = [t for t in (terms.ce_target_anchor, terms.ce_target_prob) if t is not None]
    if lambda_ce != 0.0 and ces:
        group = ces[0] if len(ces) == 1 else ces[0] + ces[1]
        total = total + scalar(lambda_ce) * group
    return total


@dataclass
class LossBreakdown:
    """Float values of every component for logging and audits."""

    ce_source: float
    dis_source: float
    ce_target_anchor: float
    dis_target: float
    ce_target_prob: float
    total: float
    active_pixel_counts: dict = field(default_factory=dict)

    @classmethod
    def from_terms(cls, terms: LossTerms, total: Tensor,
                   active_pixel_counts: dict | None = None) -> "LossBreakdown":
        def val(t):
            return float(t.item()) if t is not None else 0.0
        return cls(val(terms.ce_source), val(terms.dis_source),
                   val(terms.ce_target_anchor), val(terms.dis_target),
                   val(terms.ce_target_prob), float(total.item()),
                   dict(active_pixel_counts or {}))

    def check(self, lambda_dis: float, lambda_ce: float, tol: float = 1e-12) -> None:
        recomputed = (self.ce_source
                      + lambda_dis * (self.dis_source + self.dis_target)
                      + lambda_ce * (self.ce_target_anchor + self.ce_target_prob))
        if abs(recomputed - self.total) > tol * max(1.0, abs(self.total)):
            raise ValueError(f"breakdown does not add up: {recomputed} vs {self.total}")
        for name in ("ce_source", "dis_source", "ce_target_anchor",
                     "dis_target", "ce_target_prob"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} is negative")

    def as_record(self) -> dict:
        rec = {
            "ce_source": self.ce_source,
            "dis_source": self.dis_source,
            "ce_target_anchor": self.ce_target_anchor,
            "dis_target": self.dis_target,
            "ce_target_prob": self.ce_target_prob,
            "total": self.total,
        }
        for key, n in self.active_pixel_counts.items():
            rec[f"pixels_{key}"] = int(n)
            if n > 0 and key in rec:
                rec[f"{key}_mean"] = rec[key] / n
        return rec


def adversarial_losses(disc, source_features: Tensor,
                       target_features: Tensor) -> tuple[Tensor, Tensor]:
    """Warm-up pair: (discriminator loss, alignment loss), both pixel sums.

    The discriminator loss scores detached features against domain labels
    (source=1, target=0), so it trains the discriminator alone. The
    alignment loss scores live target features against label 1 through a
    frozen copy of the discriminator, so it trains the model alone.
    """
    src_logits = disc.forward(source_features.detach())
    tgt_logits = disc.forward(target_features.detach())
    ns, nt = src_logits.shape[0], tgt_logits.shape[0]
    disc_loss = (reduce_sum(bce_with_logits(src_logits, np.ones((ns, 1))))
                 + reduce_sum(bce_with_logits(tgt_logits, np.zeros((nt, 1)))))
    fool_logits = disc.forward_frozen(target_features)
    align_loss = reduce_sum(bce_with_logits(fool_logits, np.ones((nt, 1))))
    return disc_loss, align_loss
