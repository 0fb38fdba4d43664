"""Overlap and agreement metrics.

Binary metrics treat ``1`` / ``True`` as the positive class. When comparing
error maps that means misclassified voxels are positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .volume import LabelMask


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError(f"negative count in {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricReport:
    dsc: float
    acc: float
    prec: float
    recl: float
    per_class_dsc: tuple[float, ...] = field(default=())

    def __post_init__(self):
        for name in ("dsc", "acc", "prec", "recl"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    @classmethod
    def from_counts(cls, counts: ConfusionCounts) -> "MetricReport":
        acc, prec, recl = acc_prec_recl(counts)
        return cls(dice_binary(counts), acc, prec, recl)


def confusion(pred, truth) -> ConfusionCounts:
    """Tally a binary prediction against a binary reference."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = pred.size - tp - fp - fn
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def dice_binary(counts: ConfusionCounts) -> float:
    """2·tp / (2·tp + fp + fn); two empty sets agree perfectly (1.0)."""
    denom = 2 * counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0
    return 2 * counts.tp / denom


def acc_prec_recl(counts: ConfusionCounts) -> tuple[float, float, float]:
    """Accuracy, precision and recall.

    Corner cases: recall is 1 when there are no positives to find; precision
    with nothing predicted is 1 if there was also nothing to find, else 0.
    """
    total = counts.total
    acc = (counts.tp + counts.tn) / total if total else 1.0
    positives = counts.tp + counts.fn
    if counts.tp + counts.fp == 0:
        prec = 1.0 if positives == 0 else 0.0
    else:
        prec = counts.tp / (counts.tp + counts.fp)
    recl = 1.0 if positives == 0 else counts.tp / positives
    return acc, prec, recl


def binary_report(pred, truth) -> MetricReport:
    return MetricReport.from_counts(confusion(pred, truth))


def _check_pair(mask: LabelMask, gt: LabelMask) -> None:
    if mask.dims != gt.dims:
        raise ValueError(f"dims mismatch: {mask.dims} vs {gt.dims}")
    if mask.num_classes != gt.num_classes:
        raise ValueError(f"class count mismatch: {mask.num_classes} vs {gt.num_classes}")


def dice_multiclass(mask: LabelMask, gt: LabelMask) -> tuple[list[float], float]:
    """Per-foreground-class DSC and their mean."""
    _check_pair(mask, gt)
    per_class = [
        dice_binary(confusion(mask.labels == c, gt.labels == c))
        for c in range(1, gt.num_classes + 1)
    ]
    return per_class, sum(per_class) / len(per_class)


def segmentation_accuracy(mask: LabelMask, gt: LabelMask) -> float:
    """Fraction of voxels whose label matches the reference."""
    _check_pair(mask, gt)
    matches = int(np.count_nonzero(mask.labels == gt.labels))
    return matches / mask.labels.size


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValueError("pearson needs at least two samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("correlation is undefined for a constant series")
    # sqrt(a * a) == a exactly, so identical series give exactly 1
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def mae(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size == 0:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    return float(np.mean(np.abs(x - y)))


def histogram(values: Sequence[float], bin_edges: Sequence[float]) -> list[int]:
    """Counts per bin; bins are right-open except the last, which is closed."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing with at least two entries")
    counts, _ = np.histogram(np.asarray(values, dtype=np.float64), bins=edges)
    return [int(c) for c in counts]
