"""
Overlap and volume metrics for binary masks.

Undefined cases (empty denominators) raise UndefinedMetricError instead of
returning 0 or 1.
"""
from typing import Optional, Sequence, Tuple

import numpy as np

from app.schemas.evaluation import CaseMetrics
from app.utils.exceptions import ShapeError, UndefinedMetricError
from app.utils.rich_logger import get_rich_logger
from config.settings import settings

logger = get_rich_logger("metrics")


def binarize(prob: np.ndarray, threshold: float) -> np.ndarray:
    """Foreground iff prob >= threshold (compared in float64)"""
    return np.asarray(prob, dtype=np.float64) >= threshold


def _pair(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(
            f"prediction {pred.shape} and annotation {gt.shape} differ",
            details={"pred": list(pred.shape), "gt": list(gt.shape)},
        )
    return pred, gt


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _pair(pred, gt)
    n_gt = int(np.count_nonzero(gt))
    if n_gt == 0:
        raise UndefinedMetricError("dice", "annotation is empty")
    inter = int(np.count_nonzero(pred & gt))
    return 2.0 * inter / (int(np.count_nonzero(pred)) + n_gt)


def precision_recall(pred: np.ndarray, gt: np.ndarray) -> Tuple[float, float]:
    pred, gt = _pair(pred, gt)
    n_pred = int(np.count_nonzero(pred))
    n_gt = int(np.count_nonzero(gt))
    if n_pred == 0:
        raise UndefinedMetricError("precision", "prediction is empty")
    if n_gt == 0:
        raise UndefinedMetricError("recall", "annotation is empty")
    inter = int(np.count_nonzero(pred & gt))
    return inter / n_pred, inter / n_gt


def volume_mm3(mask: np.ndarray, spacing: Sequence[float]) -> float:
    """count(mask) * sx * sy * sz"""
    if any(s >= settings.SPACING_WARN_MM for s in spacing):
        logger.warning(
            f"[metrics] spacing {tuple(spacing)} reaches {settings.SPACING_WARN_MM} mm on some axis; "
            "check the volume header"
        )
    sx, sy, sz = (float(s) for s in spacing)
    return int(np.count_nonzero(mask)) * sx * sy * sz


def case_metrics(
    case_id: str,
    pred: np.ndarray,
    gt: np.ndarray,
    spacing: Sequence[float],
) -> CaseMetrics:
    """Per-case row; precision is None when the prediction is empty"""
    pred, gt = _pair(pred, gt)
    d = dice(pred, gt)
    try:
        precision: Optional[float]
        precision, recall = precision_recall(pred, gt)
    except UndefinedMetricError as e:
        if e.details.get("metric") != "precision":
            raise
        precision = None
        recall = 0.0
    return CaseMetrics(
        case_id=case_id,
        dice=d,
        precision=precision,
        recall=recall,
        predicted_volume_mm3=volume_mm3(pred, spacing),
        annotated_volume_mm3=volume_mm3(gt, spacing),
        slice_thickness_mm=float(spacing[2]),
    )
