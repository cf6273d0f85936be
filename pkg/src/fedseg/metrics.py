"""Pixel-level segmentation metrics and the differentiable soft Dice loss.

Evaluation pools confusion counts over the whole dataset (micro-averaging)
before forming ratios, so images without any positive pixels are handled by
the 0/0 = 1 convention instead of producing undefined per-image scores.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ShapeError, UsageError
from .tensor import Tensor, mul

SOFT_DICE_EPS = 1e-6

METRIC_NAMES = ("dice_loss", "iou", "sensitivity", "specificity", "f1", "accuracy")


@dataclass
class ConfusionCounts:
    """Pixel counts of a binary confusion matrix; mergeable by addition."""

    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


@dataclass
class MetricsRow:
    """The six reported statistics for one evaluation pass, all in [0, 1]."""

    dice_loss: float
    iou: float
    sensitivity: float
    specificity: float
    f1: float
    accuracy: float

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in METRIC_NAMES)


def soft_dice_loss(probabilities: Tensor, truth: Tensor,
                   eps: float = SOFT_DICE_EPS) -> Tensor:
    """Differentiable Dice loss 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps).

    Computed over the whole batch in one pool, matching how evaluation
    micro-averages counts.
    """
    if probabilities.shape != truth.shape:
        raise ShapeError(
            f"soft_dice_loss: probabilities {probabilities.shape} vs "
            f"truth {truth.shape}"
        )
    intersection = mul(probabilities, truth).sum()
    denom = probabilities.sum() + truth.sum() + eps
    return 1.0 - (intersection * 2.0 + eps) / denom


def confusion(pred_probabilities, truth, threshold: float = 0.5) -> ConfusionCounts:
    """Threshold probabilities at ``threshold`` and count per-pixel outcomes."""
    p = getattr(pred_probabilities, "data", pred_probabilities)
    t = getattr(truth, "data", truth)
    p = np.asarray(p)
    t = np.asarray(t)
    if p.shape != t.shape:
        raise ShapeError(f"confusion: prediction {p.shape} vs truth {t.shape}")
    pred = p >= threshold
    pos = t >= 0.5
    return ConfusionCounts(
        tp=int(np.count_nonzero(pred & pos)),
        tn=int(np.count_nonzero(~pred & ~pos)),
        fp=int(np.count_nonzero(pred & ~pos)),
        fn=int(np.count_nonzero(~pred & pos)),
    )


def _ratio(num: int, den: int) -> float:
    # 0/0 -> 1: an empty prediction on an empty truth is a perfect outcome.
    return num / den if den > 0 else 1.0


def metrics_from_counts(c: ConfusionCounts) -> MetricsRow:
    """Derive the six reported statistics from pooled confusion counts."""
    if c.total <= 0:
        raise UsageError("metrics_from_counts: no pixels were evaluated")
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    return MetricsRow(
        dice_loss=1.0 - f1,
        iou=_ratio(c.tp, c.tp + c.fp + c.fn),
        sensitivity=_ratio(c.tp, c.tp + c.fn),
        specificity=_ratio(c.tn, c.tn + c.fp),
        f1=f1,
        accuracy=(c.tp + c.tn) / c.total,
    )
