"""mIoU evaluation harness.

Confusion counts accumulate per image (commutative, so parallel per-image
accumulation merges by addition); IoU per class is TP / (TP + FP + FN) and
the mean skips classes whose denominator is zero across the whole run.
Pixels carrying the ignore sentinel on either side are excluded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ClassOutOfRangeError,
    EmptyInputError,
    NoEvaluatedClassesError,
    ShapeMismatchError,
)
from .segmenter import IGNORE_ID


@dataclass
class ConfusionMatrix:
    """c x c counts indexed [ground truth][prediction]."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        if num_classes < 1:
            raise EmptyInputError("need at least one class")
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ShapeMismatchError("confusion matrices differ in class count")
        self.counts += other.counts
        return self


def accumulate(
    conf: ConfusionMatrix,
    pred: np.ndarray,
    gt: np.ndarray,
    ignore_value: int = IGNORE_ID,
) -> ConfusionMatrix:
    """Add one prediction/ground-truth raster pair into the confusion matrix.

    Pixels where either raster equals ``ignore_value`` are skipped; any other
    id must be < the class count.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    c = conf.num_classes
    keep = (pred != ignore_value) & (gt != ignore_value)
    p = pred[keep].astype(np.int64)
    g = gt[keep].astype(np.int64)
    if p.size:
        bad = max(int(p.max()), int(g.max()))
        if bad >= c:
            raise ClassOutOfRangeError(f"class id {bad} >= {c}")
        if int(p.min()) < 0 or int(g.min()) < 0:
            raise ClassOutOfRangeError("negative class id")
        flat = np.bincount(g * c + p, minlength=c * c)
        conf.counts += flat.reshape(c, c)
    return conf


def miou(conf: ConfusionMatrix) -> tuple[float, np.ndarray]:
    """Mean IoU and per-class IoUs (NaN for classes with empty denominators).

    IoU_j = TP_j / (TP_j + FP_j + FN_j); classes absent from both ground
    truth and prediction are excluded from the mean.

    Raises:
        NoEvaluatedClassesError: every class had an empty denominator.
    """
    counts = conf.counts.astype(np.float64)
    tp = np.diag(counts)
    denom = counts.sum(axis=0) + counts.sum(axis=1) - tp
    per_class = np.full(conf.num_classes, np.nan)
    valid = denom > 0
    per_class[valid] = tp[valid] / denom[valid]
    if not valid.any():
        raise NoEvaluatedClassesError("no class has a nonzero IoU denominator")
    return float(per_class[valid].mean()), per_class
