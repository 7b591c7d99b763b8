"""
Segmentation Metrics

Track precision, recall and IoU of dynamic-pixel predictions against
ground-truth masks. The dynamic class is the positive class.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np
from sklearn.metrics import jaccard_score, precision_score, recall_score


@dataclass
class SegmentationMetrics:
    """Metrics for one predicted dynamic mask."""
    name: str
    precision: float
    recall: float
    iou: float
    n_pixels: int
    n_dynamic_true: int
    n_dynamic_pred: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "iou": self.iou,
            "n_pixels": self.n_pixels,
            "n_dynamic_true": self.n_dynamic_true,
            "n_dynamic_pred": self.n_dynamic_pred,
        }


def segmentation_metrics(
    pred_dynamic: np.ndarray,
    true_dynamic: np.ndarray,
    valid: Optional[np.ndarray] = None,
    name: str = "dynamic",
) -> SegmentationMetrics:
    """
    Compare boolean dynamic-pixel maps.

    Args:
        pred_dynamic: Predicted dynamic pixels (True = dynamic)
        true_dynamic: Ground-truth dynamic pixels
        valid: Optional subset of pixels to score
        name: Label carried into the result

    Returns:
        SegmentationMetrics; an empty positive class on both sides scores IoU 1
    """
    pred = np.asarray(pred_dynamic, dtype=bool)
    true = np.asarray(true_dynamic, dtype=bool)
    if valid is not None:
        pred = pred[valid]
        true = true[valid]
    y_pred = pred.ravel().astype(int)
    y_true = true.ravel().astype(int)
    n_true = int(y_true.sum())
    n_pred = int(y_pred.sum())
    if n_true == 0 and n_pred == 0:
        precision = recall = iou = 1.0
    else:
        precision = float(precision_score(y_true, y_pred, zero_division=0))
        recall = float(recall_score(y_true, y_pred, zero_division=0))
        iou = float(jaccard_score(y_true, y_pred, zero_division=0))
    return SegmentationMetrics(
        name=name,
        precision=precision,
        recall=recall,
        iou=iou,
        n_pixels=int(y_true.size),
        n_dynamic_true=n_true,
        n_dynamic_pred=n_pred,
    )


class MetricsCollector:
    """
    Collects segmentation metrics per named mask (e.g. one per edge).
    """

    def __init__(self):
        self.metrics: Dict[str, SegmentationMetrics] = {}

    def record(
        self,
        name: str,
        pred_dynamic: np.ndarray,
        true_dynamic: np.ndarray,
        valid: Optional[np.ndarray] = None,
    ) -> SegmentationMetrics:
        result = segmentation_metrics(pred_dynamic, true_dynamic, valid=valid, name=name)
        self.metrics[name] = result
        return result

    def get_metrics(self, name: str) -> Optional[SegmentationMetrics]:
        return self.metrics.get(name)

    def get_summary(self) -> Dict[str, Any]:
        """Mean precision/recall/IoU over everything recorded."""
        if not self.metrics:
            return {"count": 0, "precision": 0.0, "recall": 0.0, "iou": 0.0}
        values = list(self.metrics.values())
        return {
            "count": len(values),
            "precision": float(np.mean([m.precision for m in values])),
            "recall": float(np.mean([m.recall for m in values])),
            "iou": float(np.mean([m.iou for m in values])),
        }
