"""Dataset-level IoU / mIoU / class accuracy / overall accuracy from a confusion matrix.

A class that is absent from both truth and prediction gets IoU 0 and still
counts toward mIoU. Ratios with a zero denominator are reported as 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError, UsageError


@dataclass
class ConfusionMatrix:
    num_classes: int
    background_class: Optional[int] = None
    ignore_label: Optional[int] = None
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def classes(self) -> list[int]:
        """Classes that take part in metric aggregation."""
        return [c for c in range(self.num_classes) if c != self.background_class]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred, truth) -> "ConfusionMatrix":
        pred, truth = np.asarray(pred), np.asarray(truth)
        if pred.shape != truth.shape:
            raise DataError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
        keep = np.ones(truth.shape, bool) if self.ignore_label is None else truth != self.ignore_label
        p, t = pred[keep].astype(np.int64), truth[keep].astype(np.int64)
        K = self.num_classes
        for name, arr in (("prediction", p), ("truth", t)):
            if arr.size and (arr.min() < 0 or arr.max() >= K):
                raise DataError(f"{name} contains class ids outside [0, {K})")
        self.counts += np.bincount(t * K + p, minlength=K * K).reshape(K, K)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DataError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.background_class, self.ignore_label,
                               self.counts + other.counts)


def _ratio(num, den) -> float:
    return float(num) / float(den) if den else 0.0


def iou(cm: ConfusionMatrix, j: int) -> float:
    if not 0 <= j < cm.num_classes:
        raise UsageError(f"class {j} out of range")
    if j == cm.background_class:
        raise UsageError(f"class {j} is the excluded background class")
    tp = cm.counts[j, j]
    return _ratio(tp, cm.counts[j, :].sum() + cm.counts[:, j].sum() - tp)


def miou(cm: ConfusionMatrix) -> float:
    classes = cm.classes
    if not classes:
        raise UsageError("no non-background classes to average over")
    return float(np.mean([iou(cm, j) for j in classes]))


def class_accuracy(cm: ConfusionMatrix, a: int) -> float:
    return _ratio(cm.counts[a, a], cm.counts[a, :].sum())


def overall_accuracy(cm: ConfusionMatrix) -> float:
    classes = cm.classes
    return _ratio(sum(cm.counts[a, a] for a in classes), sum(cm.counts[a, :].sum() for a in classes))


def summary(cm: ConfusionMatrix) -> dict:
    out = {f"iou_{j}": iou(cm, j) for j in cm.classes}
    out.update({f"acc_{j}": class_accuracy(cm, j) for j in cm.classes})
    out["miou"] = miou(cm)
    out["oa"] = overall_accuracy(cm)
    out["pixels"] = cm.total
    return out


NOTE = "IoU of a class absent from truth and prediction is 0 and still counted in mIoU"


def format_report(columns: dict[str, ConfusionMatrix], class_names=None) -> str:
    """Plain-text table: one row per class (IoU, Acc per column), then mIoU and OA.

    ``columns`` maps a column label (e.g. ``"w/o"``, ``"w"``) to its matrix.
    """
    labels = list(columns)
    first = next(iter(columns.values()))
    names = class_names or {j: f"class {j}" for j in range(first.num_classes)}
    head = f"{'class':<12}" + "".join(f"{lab + ' IoU':>12}{lab + ' Acc':>12}" for lab in labels)
    lines = [head, "-" * len(head)]
    for j in first.classes:
        row = f"{names[j]:<12}"
        for lab in labels:
            cm = columns[lab]
            row += f"{iou(cm, j):>12.4f}{class_accuracy(cm, j):>12.4f}"
        lines.append(row)
    lines.append("-" * len(head))
    lines.append(f"{'mIoU/OA':<12}" + "".join(
        f"{miou(columns[lab]):>12.4f}{overall_accuracy(columns[lab]):>12.4f}" for lab in labels))
    if first.background_class is not None:
        lines.append(f"background class {first.background_class} excluded from all metrics")
    lines.append(f"note: {NOTE}")
    return "\n".join(lines) + "\n"


def format_keyvalue(columns: dict[str, ConfusionMatrix]) -> str:
    lines = []
    for lab, cm in columns.items():
        tag = {"w/o": "without", "w": "with"}.get(lab, lab)
        for k, v in summary(cm).items():
            lines.append(f"{tag}.{k}={v!r}" if isinstance(v, float) else f"{tag}.{k}={v}")
    return "\n".join(lines) + "\n"
