"""Classification and segmentation metrics, all derived from one confusion matrix."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch: {y_true.shape} vs {y_pred.shape}")
    for name, arr in (("true", y_true), ("pred", y_pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} labels must lie in [0, {n_classes})")
    return np.bincount(y_true * n_classes + y_pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def _check_confusion(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    if np.any(cm < 0):
        raise ValueError("confusion matrix entries must be nonnegative")
    return cm.astype(np.float64)


@dataclass
class ClassificationReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray
    # classes absent from the test set (excluded from macro averages)
    absent: list[int] = field(default_factory=list)
    # classes with a zero precision or recall denominator (scored 0)
    flagged: list[int] = field(default_factory=list)

    def summary(self) -> dict:
        return {"macro_precision": self.macro_precision, "macro_recall": self.macro_recall,
                "macro_f1": self.macro_f1}


def classification_metrics(cm) -> ClassificationReport:
    """Per-class precision/recall/F1 and their macro averages over classes present in the test set."""
    c = _check_confusion(cm)
    tp = np.diag(c)
    row, col = c.sum(1), c.sum(0)
    precision = np.divide(tp, col, out=np.zeros_like(tp), where=col > 0)
    recall = np.divide(tp, row, out=np.zeros_like(tp), where=row > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    present = row > 0
    flagged = sorted(set(np.flatnonzero(col == 0).tolist()) | set(np.flatnonzero(row == 0).tolist()))
    if present.any():
        macro = [float(v[present].mean()) for v in (precision, recall, f1)]
    else:
        macro = [0.0, 0.0, 0.0]
    return ClassificationReport(precision, recall, f1, *macro, confusion=np.asarray(cm),
                                absent=np.flatnonzero(~present).tolist(), flagged=flagged)


@dataclass
class SegmentationReport:
    gaa: float
    ma: float
    miou: float
    per_class_accuracy: np.ndarray
    per_class_iou: np.ndarray
    confusion: np.ndarray

    def summary(self) -> dict:
        return {"gaa": self.gaa, "ma": self.ma, "miou": self.miou}


def segmentation_from_confusion(cm) -> SegmentationReport:
    """GAA, MA and mIoU; classes with empty denominators are left out of the means."""
    c = _check_confusion(cm)
    tp = np.diag(c)
    row, col = c.sum(1), c.sum(0)
    union = row + col - tp
    acc = np.divide(tp, row, out=np.full_like(tp, np.nan), where=row > 0)
    iou = np.divide(tp, union, out=np.full_like(tp, np.nan), where=union > 0)
    total = c.sum()
    gaa = float(tp.sum() / total) if total > 0 else 0.0
    ma = float(np.nanmean(acc)) if np.any(row > 0) else 0.0
    miou = float(np.nanmean(iou)) if np.any(union > 0) else 0.0
    return SegmentationReport(gaa, ma, miou, acc, iou, np.asarray(cm))


def segmentation_metrics(pred, true, n_classes: int) -> SegmentationReport:
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    return segmentation_from_confusion(confusion_matrix(true, pred, n_classes))
