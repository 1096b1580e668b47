"""Segmentation metrics: per-class IoU, mean IoU and pixel accuracy."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """``cm[g, p]`` counts pixels with ground truth g predicted as p."""
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction has {pred.size} pixels, ground truth {gt.size}")
    if pred.size and (min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= num_classes):
        raise ValueError(f"class index outside [0, {num_classes})")
    return np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


@dataclass
class SegmentationScores:
    iou: list[float | None]
    mean_iou: float
    accuracy: float

    def to_dict(self) -> dict:
        return {"iou": self.iou, "mean_iou": self.mean_iou, "accuracy": self.accuracy}


def scores_from_confusion(cm: np.ndarray) -> SegmentationScores:
    """IoU per class (``None`` when the class is absent from both maps), their mean, and accuracy."""
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    iou = [float(i / u) if u > 0 else None for i, u in zip(inter, union)]
    present = [v for v in iou if v is not None]
    total = cm.sum()
    return SegmentationScores(
        iou=iou,
        mean_iou=float(np.mean(present)) if present else 0.0,
        accuracy=float(inter.sum() / total) if total else 0.0,
    )


def segmentation_scores(pred, gt, num_classes: int) -> SegmentationScores:
    return scores_from_confusion(confusion_matrix(pred, gt, num_classes))


@dataclass
class EvalResult:
    class_names: list[str]
    iou: list[float | None]
    mean_iou: float
    accuracy: float
    per_view: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "class_names": self.class_names,
            "iou": self.iou,
            "mean_iou": self.mean_iou,
            "accuracy": self.accuracy,
            "per_view": self.per_view,
        }
