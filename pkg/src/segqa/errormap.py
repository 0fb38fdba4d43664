"""Error maps and the quality indicator derived from them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import LabelMask

DEFAULT_TAU = 0.5


@dataclass(frozen=True, eq=False)
class ErrorMap:
    """Binary per-voxel error field; 1 marks a misclassified voxel."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.size and not np.isin(bits, (0, 1)).all():
            raise ValueError("error map values must be 0 or 1")
        bits = np.ascontiguousarray(bits.astype(np.uint8))
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.bits.shape)

    def to_mask(self, spacing=(1.0, 1.0, 1.0)) -> LabelMask:
        """View as a ``C=1`` label mask (the on-disk representation)."""
        return LabelMask(self.bits, 1, spacing)


@dataclass(frozen=True, eq=False)
class SoftErrorMap:
    """Per-voxel probability of misclassification."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float32)
        if probs.size and (probs.min() < 0.0 or probs.max() > 1.0 or not np.isfinite(probs).all()):
            raise ValueError("error probabilities must lie in [0, 1]")
        probs = np.ascontiguousarray(probs)
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.probs.shape)


def true_error_map(s: LabelMask, gt: LabelMask) -> ErrorMap:
    """1 where ``s`` disagrees with ``gt``, 0 where they agree."""
    if s.dims != gt.dims:
        raise ValueError(f"dims mismatch: {s.dims} vs {gt.dims}")
    if s.num_classes != gt.num_classes:
        raise ValueError(f"class count mismatch: {s.num_classes} vs {gt.num_classes}")
    return ErrorMap(s.labels != gt.labels)


def binarize(soft: SoftErrorMap, tau: float = DEFAULT_TAU) -> ErrorMap:
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {tau}")
    return ErrorMap(soft.probs >= tau)


def quality_indicator(e: ErrorMap) -> float:
    """Predicted fraction of correctly labelled voxels, ``1 - mean(error map)``.

    Computed as ``correct / total`` so that, on a true error map, the value is
    bit-identical to segmentation accuracy.
    """
    total = e.bits.size
    correct = total - int(np.count_nonzero(e.bits))
    return correct / total


def qi_from_truth(s: LabelMask, gt: LabelMask) -> float:
    return quality_indicator(true_error_map(s, gt))
