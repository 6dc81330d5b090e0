"""Confusion-matrix segmentation metrics: pixel accuracy, mean accuracy, mIoU."""

from __future__ import annotations

import json

import numpy as np

from glpnet.tensor import ContractError

IGNORE_INDEX = 255


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions. Pixels labelled
    ``ignore_index`` are never counted."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, label: np.ndarray) -> None:
        pred = np.asarray(pred).ravel()
        label = np.asarray(label).ravel()
        if pred.shape != label.shape:
            raise ValueError(f"prediction and label sizes differ: {pred.size} vs {label.size}")
        keep = label != self.ignore_index
        pred, label = pred[keep].astype(np.int64), label[keep].astype(np.int64)
        k = self.num_classes
        for name, arr in (("label", label), ("prediction", pred)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise ValueError(f"{name} class id out of range [0, {k})")
        self.counts += np.bincount(label * k + pred, minlength=k * k).reshape(k, k)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes, self.ignore_index)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def cm_update(cm: ConfusionMatrix, pred, label) -> None:
    cm.update(pred, label)


def compute_metrics(cm: ConfusionMatrix) -> dict:
    """Acc, mAcc and mIoU.

    mAcc averages over classes that occur in the labels; mIoU over classes
    that occur in the labels or the predictions.
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise ContractError("no scored pixels in confusion matrix")
    diag = np.diag(counts)
    rows, cols = counts.sum(axis=1), counts.sum(axis=0)
    union = rows + cols - diag
    present = union > 0
    per_class_iou = np.where(present, diag / np.where(present, union, 1), np.nan)
    per_class_acc = np.where(rows > 0, diag / np.where(rows > 0, rows, 1), np.nan)
    return {
        "acc": float(diag.sum() / total),
        "macc": float(per_class_acc[rows > 0].mean()),
        "miou": float(per_class_iou[present].mean()),
        "per_class_iou": [None if np.isnan(v) else float(v) for v in per_class_iou],
    }


def metrics_report(metrics: dict) -> str:
    keys = ("acc", "macc", "miou", "per_class_iou")
    return json.dumps({k: metrics[k] for k in keys if k in metrics}, indent=2)
