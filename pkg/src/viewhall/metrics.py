"""Segmentation metrics: confusion matrices, IoU, adaptation gain."""

from __future__ import annotations

from dataclasses import dataclass

from fractions import Fraction

import numpy as np


@dataclass
class ConfusionMatrix:
    """C×C counts, rows = ground truth, columns = prediction.  Mergeable with ``+``."""

    counts: np.ndarray

    @classmethod
    def empty(cls, n_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64))

    @classmethod
    def from_labels(cls, preds, gts, n_classes: int, mask=None) -> "ConfusionMatrix":
        preds = np.asarray(preds).astype(np.int64).ravel()
        gts = np.asarray(gts).astype(np.int64).ravel()
        if preds.shape != gts.shape:
            raise ValueError(f"prediction/ground-truth size mismatch: {preds.shape} vs {gts.shape}")
        if mask is not None:
            keep = np.asarray(mask, dtype=bool).ravel()
            preds, gts = preds[keep], gts[keep]
        for name, arr in (("prediction", preds), ("ground truth", gts)):
            if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
                raise ValueError(f"{name} label outside [0, {n_classes}): range {arr.min()}..{arr.max()}")
        counts = np.bincount(gts * n_classes + preds, minlength=n_classes ** 2)
        return cls(counts.reshape(n_classes, n_classes))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both prediction and ground truth."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)

    def miou(self) -> float:
        """Mean IoU over classes with a nonzero union, computed exactly from the counts and rounded once."""
        tp = np.diag(self.counts)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        terms = [Fraction(int(t), int(u)) for t, u in zip(tp, union) if u > 0]
        if not terms:
            return float("nan")
        return float(sum(terms) / len(terms))


def miou(preds, gts, n_classes: int, mask=None) -> tuple[list[float], float]:
    """(per-class IoU, mean over classes present in prediction or ground truth)."""
    cm = ConfusionMatrix.from_labels(preds, gts, n_classes, mask)
    return [float(v) for v in cm.iou()], cm.miou()


def adaptation_gain(adapted_miou: float, baseline_miou: float) -> float:
    return float(adapted_miou) - float(baseline_miou)
