"""Shared evaluation metrics: micro-F1, accuracy, Matthews and Spearman correlation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_counts(predictions, labels) -> ConfusionCounts:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValidationError(f"length mismatch: {p.shape} vs {y.shape}")
    return ConfusionCounts(
        tp=int(((p == 1) & (y == 1)).sum()),
        fp=int(((p == 1) & (y == 0)).sum()),
        fn=int(((p == 0) & (y == 1)).sum()),
        tn=int(((p == 0) & (y == 0)).sum()),
    )


def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape or p.size == 0:
        raise ValidationError("predictions and labels must be equal-length and non-empty")
    return float((p == y).mean())


def f1_micro(predictions, labels) -> float:
    """Micro-averaged F1 from pooled per-class TP/FP/FN counts.

    With one prediction per sample every error is both a false positive (for
    the predicted class) and a false negative (for the true class), so
    micro-precision, micro-recall, and accuracy coincide.
    """
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape or p.size == 0:
        raise ValidationError("predictions and labels must be equal-length and non-empty")
    classes = np.unique(np.concatenate([p, y]))
    tp = sum(int(((p == c) & (y == c)).sum()) for c in classes)
    fp = sum(int(((p == c) & (y != c)).sum()) for c in classes)
    fn = sum(int(((p != c) & (y == c)).sum()) for c in classes)
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2.0 * tp / (2 * tp + fp + fn)


def matthews_corr(predictions, labels) -> float:
    """Binary Matthews correlation; a zero denominator returns 0 by convention."""
    c = confusion_counts(predictions, labels)
    num = c.tp * c.tn - c.fp * c.fn
    den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if den == 0:
        return 0.0
    return num / math.sqrt(den)


def _fractional_ranks(x: np.ndarray) -> np.ndarray:
    """Average ranks for ties, 1-based."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(x, y) -> float:
    """Pearson correlation of fractional ranks; NaN flags a constant input."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.size < 2:
        raise ValidationError("spearman_rho needs two equal-length vectors of size >= 2")
    rx = _fractional_ranks(xa)
    ry = _fractional_ranks(ya)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        return float("nan")
    return float(dx @ dy) / denom
