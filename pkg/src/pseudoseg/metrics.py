"""mIoU and expected calibration error, as mergeable accumulators."""
from __future__ import annotations

import numpy as np

from .config import IGNORE_INDEX


class UndefinedMetricError(ValueError):
    pass


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions; ignored pixels skipped."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts

    def update(self, pred, target) -> "ConfusionMatrix":
        pred = np.asarray(pred).reshape(-1).astype(np.int64)
        target = np.asarray(target).reshape(-1).astype(np.int64)
        keep = target != IGNORE_INDEX
        idx = target[keep] * self.num_classes + pred[keep]
        self.counts += np.bincount(idx, minlength=self.num_classes ** 2).reshape(self.num_classes, self.num_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def miou(self) -> tuple[float, np.ndarray]:
        """Mean IoU over classes with a non-empty union, plus per-class IoU (nan if empty)."""
        if self.total == 0:
            raise UndefinedMetricError("mIoU is undefined on an empty confusion matrix")
        inter = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(union > 0, inter / union, np.nan)
        return float(np.nanmean(iou)), iou


def miou(cm: ConfusionMatrix) -> tuple[float, np.ndarray]:
    return cm.miou()


class CalibrationBins:
    """Equal-width confidence bins over (0, 1]; bin b covers (b/B, (b+1)/B]."""

    def __init__(self, n_bins: int = 15):
        self.n_bins = n_bins
        self.edges = np.linspace(0.0, 1.0, n_bins + 1)
        self.count = np.zeros(n_bins, dtype=np.int64)
        self.sum_conf = np.zeros(n_bins)
        self.sum_correct = np.zeros(n_bins)

    def update(self, confidence, correct) -> "CalibrationBins":
        conf = np.asarray(confidence, dtype=np.float64).reshape(-1)
        corr = np.asarray(correct, dtype=np.float64).reshape(-1)
        if conf.size and (conf.min() <= 0 or conf.max() > 1):
            raise ValueError("confidences must lie in (0, 1]")
        b = np.clip(np.ceil(conf * self.n_bins).astype(np.int64) - 1, 0, self.n_bins - 1)
        self.count += np.bincount(b, minlength=self.n_bins)
        self.sum_conf += np.bincount(b, weights=conf, minlength=self.n_bins)
        self.sum_correct += np.bincount(b, weights=corr, minlength=self.n_bins)
        return self

    def merge(self, other: "CalibrationBins") -> "CalibrationBins":
        out = CalibrationBins(self.n_bins)
        out.count = self.count + other.count
        out.sum_conf = self.sum_conf + other.sum_conf
        out.sum_correct = self.sum_correct + other.sum_correct
        return out

    def ece(self) -> float:
        n = self.count.sum()
        if n == 0:
            raise UndefinedMetricError("ECE is undefined with no scored samples")
        gap = np.abs(self.sum_correct - self.sum_conf)
        return float(gap.sum() / n)


def ece(confidence, correct, n_bins: int = 15) -> float:
    """Expected calibration error: sum_b (n_b / N) |acc_b - conf_b|."""
    return CalibrationBins(n_bins).update(confidence, correct).ece()


def score_distribution(bins: CalibrationBins, probs: np.ndarray, target: np.ndarray) -> CalibrationBins:
    """Add every non-ignored pixel of a ``(C, H, W)`` distribution to ``bins``."""
    keep = target != IGNORE_INDEX
    conf = probs.max(0)[keep]
    correct = probs.argmax(0)[keep] == target[keep]
    return bins.update(np.clip(conf, np.finfo(np.float64).tiny, 1.0), correct)
