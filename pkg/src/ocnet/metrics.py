"""Confusion matrix accumulation and IoU metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, pred: np.ndarray, truth: np.ndarray, ignore_label: int = 255) -> "ConfusionMatrix":
        k = self.num_classes
        valid = truth != ignore_label
        idx = truth[valid].astype(np.int64) * k + pred[valid].astype(np.int64)
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def miou(cm: ConfusionMatrix) -> tuple[list[float], float, float]:
    """Per-class IoU, mean IoU and overall pixel accuracy.

    Classes that appear in neither truth nor prediction get IoU ``nan`` and
    are left out of the mean.
    """
    counts = cm.counts.astype(np.float64)
    if counts.sum() <= 0:
        raise ContractError("miou of an empty confusion matrix")
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    return iou.tolist(), float(np.nanmean(iou)), float(tp.sum() / counts.sum())
