"""Confusion-matrix IoU evaluation.

Rows of the confusion matrix are ground truth, columns are predictions.
IGNORE pixels are never counted; argmax ties resolve to the lowest class.
A class absent from both truth and prediction has no IoU and is left out of
the mean.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import IGNORE, Dataset, Prediction, SegMask, argmax_labels


@dataclass
class ConfusionMatrix:
    num_classes: int
    counts: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot add confusion matrices over different class sets")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


def accumulate_labels(cm: ConfusionMatrix, pred_labels: np.ndarray, truth: np.ndarray) -> ConfusionMatrix:
    pred_labels = np.asarray(pred_labels)
    truth = np.asarray(truth)
    if pred_labels.shape != truth.shape:
        raise ValueError(f"prediction {pred_labels.shape} and truth {truth.shape} shapes differ")
    k = cm.num_classes
    valid = truth != IGNORE
    t = truth[valid].astype(np.int64)
    p = pred_labels[valid].astype(np.int64)
    if t.size and (t.max() >= k or t.min() < 0):
        raise ValueError(f"truth holds labels outside [0, {k - 1}]")
    cm.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    return cm


def accumulate(cm: ConfusionMatrix, pred: Prediction, truth: SegMask) -> ConfusionMatrix:
    return accumulate_labels(cm, argmax_labels(pred.probs), truth.labels)


@dataclass
class EvalReport:
    per_class_iou: list[Optional[float]]
    miou: float
    oracle_miou: Optional[float] = None
    iou_gap: Optional[float] = None
    class_names: Sequence[str] = field(default_factory=tuple)

    def with_oracle(self, oracle: "EvalReport") -> "EvalReport":
        return EvalReport(self.per_class_iou, self.miou, oracle.miou, iou_gap(self, oracle), self.class_names)

    def to_dict(self) -> dict:
        pct = lambda v: None if v is None else round(100.0 * v, 2)
        d = {
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "per_class_iou_pct": [pct(v) for v in self.per_class_iou],
            "miou_pct": pct(self.miou),
        }
        if self.class_names:
            d["class_names"] = list(self.class_names)
        if self.oracle_miou is not None:
            d.update(oracle_miou=self.oracle_miou, iou_gap=self.iou_gap,
                     oracle_miou_pct=pct(self.oracle_miou), iou_gap_pct=pct(self.iou_gap))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(list(d["per_class_iou"]), float(d["miou"]), d.get("oracle_miou"), d.get("iou_gap"),
                   tuple(d.get("class_names", ())))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def iou(cm: ConfusionMatrix, class_names: Sequence[str] = ()) -> EvalReport:
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(axis=1) + c.sum(axis=0) - tp
    per_class = [None if d == 0 else float(t / d) for t, d in zip(tp, denom)]
    defined = [v for v in per_class if v is not None]
    if not defined:
        raise ValueError("no class has a defined IoU (empty confusion matrix)")
    return EvalReport(per_class, float(np.mean(defined)), class_names=tuple(class_names))


def iou_gap(report: EvalReport, oracle_report: EvalReport) -> float:
    """Oracle mIoU minus model mIoU (lower is better)."""
    if len(report.per_class_iou) != len(oracle_report.per_class_iou):
        raise ValueError("reports cover different class sets")
    return oracle_report.miou - report.miou


def confusion_for(model, dataset: Dataset, batch_size: int = 8) -> ConfusionMatrix:
    from .segnet import predict_probs

    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if dataset.masks is None:
        raise ValueError("evaluation needs a labelled dataset")
    cm = ConfusionMatrix(dataset.num_classes)
    # group equal-sized tiles so they can be batched
    by_shape: dict[tuple, list[int]] = {}
    for i, t in enumerate(dataset.tiles):
        by_shape.setdefault(t.shape, []).append(i)
    for idx in by_shape.values():
        images = np.stack([dataset.tiles[i].chw() for i in idx])
        probs = predict_probs(model, images, batch_size)
        for j, i in enumerate(idx):
            accumulate_labels(cm, argmax_labels(probs[j]), dataset.masks[i].labels)
    return cm


def evaluate(model, dataset: Dataset, class_names: Sequence[str] = ()) -> EvalReport:
    return iou(confusion_for(model, dataset), class_names)


def render_table(rows: Sequence[tuple[str, EvalReport]], class_names: Sequence[str]) -> str:
    """Plain-text table: per-class IoU, mIoU and IoU gap, all in percent."""
    head = ["Method"] + list(class_names) + ["mIoU", "IoU gap"]
    lines = []
    for name, r in rows:
        cells = [name] + ["-" if v is None else f"{100 * v:.2f}" for v in r.per_class_iou]
        cells += [f"{100 * r.miou:.2f}", "-" if r.iou_gap is None else f"{100 * r.iou_gap:.2f}"]
        lines.append(cells)
    widths = [max(len(str(x)) for x in col) for col in zip(head, *lines)]
    fmt = lambda cells: " | ".join(str(c).ljust(w) for c, w in zip(cells, widths))
    out = [fmt(head), "-+-".join("-" * w for w in widths)]
    out += [fmt(c) for c in lines]
    return "\n".join(out)
