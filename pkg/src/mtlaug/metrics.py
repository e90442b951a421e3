"""Confusion matrices and the unweighted average recall metric."""

from __future__ import annotations

import logging

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)


class ConfusionMatrix:
    """k x k integer counts; rows are true classes, columns predictions."""

    def __init__(self, n_classes: int, counts: np.ndarray | None = None):
        if counts is None:
            counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (n_classes, n_classes) or np.any(counts < 0):
            raise ValidationError("confusion matrix must be square with non-negative counts")
        self.counts = counts

    def add(self, true_idx, pred_idx):
        for t, p in zip(np.atleast_1d(true_idx), np.atleast_1d(pred_idx)):
            self.counts[int(t), int(p)] += 1

    def merge(self, other: "ConfusionMatrix"):
        self.counts += other.counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_list(self) -> list[list[int]]:
        return self.counts.tolist()


def uar(cm: ConfusionMatrix | np.ndarray) -> float:
    """Mean per-class recall; true classes with no examples are excluded
    (with a warning), an entirely empty matrix is an error."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    row_totals = counts.sum(axis=1)
    present = row_totals > 0
    if not np.any(present):
        raise ValidationError("cannot compute UAR of an empty confusion matrix")
    if not np.all(present):
        log.warning("uar: excluding %d absent true class(es) from the average",
                    int(np.sum(~present)))
    recalls = np.diag(counts)[present] / row_totals[present]
    return float(np.mean(recalls))


def weighted_accuracy(cm: ConfusionMatrix | np.ndarray) -> float:
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    total = counts.sum()
    if total == 0:
        raise ValidationError("cannot compute accuracy of an empty confusion matrix")
    return float(np.trace(counts) / total)
