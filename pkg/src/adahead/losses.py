"""Composite detection objective: focal-weighted classification, squared
coordinate regression, and squared no-object confidence, combined as

    total = cls + lambda_coord * coord + lambda_noobj * noobj

The coordinate weight is applied exactly once, here in the total; the
component ops return unweighted means so their magnitudes are batch-size
invariant (every mean is over the number of contributing terms).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .anchors import Assignment
from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor

PROB_FLOOR = 1e-12

# incremented instead of raising for recoverable oddities; see reset_counters
warning_counters = {"clamped_probs": 0, "empty_positives": 0}


def reset_counters() -> None:
    for k in warning_counters:
        warning_counters[k] = 0


@dataclass
class LossConfig:
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    gamma: float = 2.0
    alpha: np.ndarray | None = None   # per-category weights; None = all ones
    use_focal_cls: bool = True
    # extra confidence signal: positive objectness regressed toward the IoU
    # of the decoded prediction with its ground truth
    objectness_iou_target: bool = True

    def __post_init__(self):
        if self.lambda_coord <= 0 or self.lambda_noobj < 0:
            raise ConfigError(
                f"loss weights must be positive, got lambda_coord={self.lambda_coord}, "
                f"lambda_noobj={self.lambda_noobj}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.alpha is not None:
            self.alpha = np.asarray(self.alpha, dtype=np.float64)
            if np.any(self.alpha <= 0):
                raise ConfigError("alpha weights must be positive")

    def alpha_for(self, labels: np.ndarray) -> np.ndarray:
        if self.alpha is None:
            return np.ones(len(labels))
        if labels.size and labels.max() >= len(self.alpha):
            raise ShapeError(
                f"label {labels.max()} out of range for {len(self.alpha)} categories")
        return self.alpha[labels]


@dataclass
class LossBreakdown:
    cls: float
    coord: float
    noobj: float
    total: float
    total_tensor: Tensor = field(repr=False, default=None)


def class_weights(sample_weights) -> np.ndarray:
    """Inverse-frequency category weights: alpha_t = sum(w) / w_t."""
    w = np.asarray(sample_weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ConfigError(
            f"category weights must be positive (smooth zero counts first), got {w}")
    return w.sum() / w


def _pow(t: Tensor, exponent: float) -> Tensor:
    """t ** exponent for constant exponent >= 0 (0**positive -> 0 grad-safe)."""
    if exponent == 0.0:
        return Tensor(np.ones_like(t.data))
    if exponent == 1.0:
        return t
    out = t.data ** exponent
    return T._record("pow", (t,), out,
                     lambda g: (g * exponent * t.data ** (exponent - 1.0),))


def focal_term(p_t, alpha_t=1.0, gamma: float = 0.0) -> Tensor:
    """Per-sample focal loss -alpha_t * (1 - p_t)^gamma * log(p_t).

    p_t below the probability floor is clamped (warning counter bumped);
    the result is elementwise, nonnegative, zero only at p_t = 1.
    """
    p = p_t if isinstance(p_t, Tensor) else Tensor(p_t)
    if np.any(p.data < PROB_FLOOR):
        warning_counters["clamped_probs"] += 1
        p = T.maximum(p, PROB_FLOOR)
    alpha = np.asarray(alpha_t, dtype=p.data.dtype)
    modulation = _pow(T.sub(1.0, p), gamma)
    return T.mul(T.mul(modulation, T.log(p)), -alpha)


def cls_loss(pred_probs: Tensor, labels, config: LossConfig) -> Tensor:
    """Mean per-positive classification loss.

    pred_probs rows are category distributions (softmax upstream); the true
    category's probability enters either a plain negative log-likelihood or,
    with use_focal_cls, the focal term with the configured alpha and gamma.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        warning_counters["empty_positives"] += 1
        return Tensor(0.0)
    n, ncat = pred_probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= ncat:
        raise ShapeError(
            f"label out of range [0, {ncat}): {labels.min()}..{labels.max()}")
    onehot = np.zeros((n, ncat), dtype=pred_probs.data.dtype)
    onehot[np.arange(n), labels] = 1.0
    p_true = T.reduce_sum(T.mul(pred_probs, onehot), dims=1)
    if config.use_focal_cls:
        terms = focal_term(p_true, config.alpha_for(labels), config.gamma)
    else:
        terms = focal_term(p_true, 1.0, 0.0)  # plain cross-entropy
    return T.reduce_mean(terms, 0)


def coord_loss(pred_t: Tensor, target_t) -> Tensor:
    """Mean over positive anchors of the 4-term squared offset error."""
    target = np.asarray(target_t)
    if target.size == 0:
        warning_counters["empty_positives"] += 1
        return Tensor(0.0)
    if pred_t.shape != target.shape or pred_t.shape[-1] != 4:
        raise ShapeError(
            f"coord shapes {pred_t.shape} vs {target.shape}, want (P, 4)")
    sq = T.square(T.sub(pred_t, target.astype(pred_t.data.dtype)))
    return T.reduce_mean(T.reduce_sum(sq, dims=1), 0)


def noobj_loss(confidences: Tensor, assignment: Assignment | None = None) -> Tensor:
    """Mean squared confidence over negative, non-ignored anchors.

    With an assignment, confidences covers all anchors and the negatives are
    selected here; without one, the rows are taken as already-filtered.
    """
    conf = confidences
    if assignment is not None:
        neg = np.flatnonzero(assignment.negative)
        if neg.size == 0:
            return Tensor(0.0)
        conf = T.gather_rows(T.reshape(conf, (-1, 1)), neg)
    if conf.size == 0:
        return Tensor(0.0)
    return T.reduce_mean(T.square(conf), None)


def total_loss(cls_t: Tensor, coord_t: Tensor, noobj_t: Tensor,
               config: LossConfig) -> LossBreakdown:
    """Weighted sum of the three components as one fused expression."""
    for name, t in (("cls", cls_t), ("coord", coord_t), ("noobj", noobj_t)):
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"non-finite {name} loss component")
    total_t = T.add(T.add(cls_t, T.mul(coord_t, config.lambda_coord)),
                    T.mul(noobj_t, config.lambda_noobj))
    return LossBreakdown(cls=float(cls_t.data), coord=float(coord_t.data),
                         noobj=float(noobj_t.data), total=float(total_t.data),
                         total_tensor=total_t)
