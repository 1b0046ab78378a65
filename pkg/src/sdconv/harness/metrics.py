"""Intersection-over-union metrics on integer label maps."""
from __future__ import annotations

import numpy as np


def _check(pred, truth, num_classes: int):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    for name, arr in (("prediction", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} holds labels outside [0, {num_classes})")
    return pred.astype(np.int64).ravel(), truth.astype(np.int64).ravel()


def confusion_matrix(pred, truth, num_classes: int) -> np.ndarray:
    """``cm[t, p]`` counts pixels of true class ``t`` predicted as ``p``."""
    p, t = _check(pred, truth, num_classes)
    return np.bincount(t * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> np.ndarray:
    """Per-class TP / (TP + FP + FN); NaN for classes absent from both maps."""
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)


def iou(pred, truth, c: int, num_classes: int) -> float:
    if not 0 <= c < num_classes:
        raise ValueError(f"class {c} outside [0, {num_classes})")
    return float(iou_from_confusion(confusion_matrix(pred, truth, num_classes))[c])


def mean_iou_from_confusion(cm: np.ndarray) -> float:
    scores = iou_from_confusion(cm)
    present = ~np.isnan(scores)
    return float(scores[present].mean()) if present.any() else float("nan")


def mean_iou(pred, truth, num_classes: int) -> float:
    """Mean over classes occurring in the prediction or the truth."""
    return mean_iou_from_confusion(confusion_matrix(pred, truth, num_classes))
