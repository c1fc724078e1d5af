"""Segmentation metrics computed per image, then averaged over images and
classes: mIoU, mPrecision, mRecall, mF1.

Conventions for empty cells:
  * an (image, class) cell with TP + FP + FN == 0 is skipped for that class;
  * a counted cell with TP + FP == 0 has precision 0, with TP + FN == 0 recall 0;
  * a class skipped in every image is left out of the class mean (reported NaN);
  * F1_c is 0 when Pre_c + Rec_c == 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class ConfusionAccumulator:
    num_classes: int
    tp: list[np.ndarray] = field(default_factory=list)
    fp: list[np.ndarray] = field(default_factory=list)
    fn: list[np.ndarray] = field(default_factory=list)

    @property
    def num_images(self) -> int:
        return len(self.tp)

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge accumulators with different class counts")
        return ConfusionAccumulator(self.num_classes, self.tp + other.tp, self.fp + other.fp,
                                    self.fn + other.fn)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        c = self.num_classes
        if not self.tp:
            empty = np.zeros((0, c), dtype=np.int64)
            return empty, empty, empty
        return np.stack(self.tp), np.stack(self.fp), np.stack(self.fn)


def accumulate(pred_mask: np.ndarray, gt_mask: np.ndarray, acc: ConfusionAccumulator
               ) -> ConfusionAccumulator:
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    c = acc.num_classes
    for name, m in (("prediction", pred), ("ground truth", gt)):
        if m.size and (m.min() < 0 or m.max() >= c):
            raise ValueError(f"{name} mask has class index outside [0, {c})")
    pred = pred.astype(np.int64).ravel()
    gt = gt.astype(np.int64).ravel()
    conf = np.bincount(gt * c + pred, minlength=c * c).reshape(c, c)
    tp = np.diag(conf).copy()
    acc.tp.append(tp)
    acc.fp.append(conf.sum(axis=0) - tp)
    acc.fn.append(conf.sum(axis=1) - tp)
    return acc


def accumulate_batch(preds: np.ndarray, gts: np.ndarray, acc: ConfusionAccumulator
                     ) -> ConfusionAccumulator:
    for p, g in zip(preds, gts):
        accumulate(p, g, acc)
    return acc


@dataclass
class MetricSummary:
    iou: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray

    def _mean(self, arr):
        valid = ~np.isnan(arr)
        return float(arr[valid].mean()) if valid.any() else float("nan")

    @property
    def miou(self) -> float:
        return self._mean(self.iou)

    @property
    def mprecision(self) -> float:
        return self._mean(self.precision)

    @property
    def mrecall(self) -> float:
        return self._mean(self.recall)

    @property
    def mf1(self) -> float:
        return self._mean(self.f1)

    def means(self) -> dict[str, float]:
        return {"mIoU": self.miou, "mF1": self.mf1, "mPrecision": self.mprecision,
                "mRecall": self.mrecall}


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros(num.shape, dtype=float), where=den > 0)


def summarize(acc: ConfusionAccumulator) -> MetricSummary:
    if acc.num_images < 1:
        raise ValueError("summarize needs at least one image")
    tp, fp, fn = (a.astype(float) for a in acc.arrays())
    counted = (tp + fp + fn) > 0
    n_counted = counted.sum(axis=0)
    present = n_counted > 0

    def image_mean(per_cell):
        # fsum is correctly rounded, so the mean does not depend on image order
        out = np.full(acc.num_classes, np.nan)
        for c in np.flatnonzero(present):
            out[c] = math.fsum(per_cell[counted[:, c], c]) / n_counted[c]
        return out

    iou = image_mean(_ratio(tp, tp + fp + fn))
    pre = image_mean(_ratio(tp, tp + fp))
    rec = image_mean(_ratio(tp, tp + fn))
    denom = pre + rec
    f1 = np.full(acc.num_classes, np.nan)
    ok = present & (denom > 0)
    f1[ok] = 2 * pre[ok] * rec[ok] / denom[ok]
    f1[present & ~(denom > 0)] = 0.0
    return MetricSummary(iou, pre, rec, f1)


METRIC_COLUMNS = ("class", "IoU", "F1", "Precision", "Recall")


def write_metric_csv(summary: MetricSummary, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for c in range(len(summary.iou)):
            w.writerow([c, _f(summary.iou[c]), _f(summary.f1[c]), _f(summary.precision[c]),
                        _f(summary.recall[c])])
        w.writerow(["MEAN", _f(summary.miou), _f(summary.mf1), _f(summary.mprecision),
                    _f(summary.mrecall)])


def read_metric_csv(path: str | Path) -> dict[str, float]:
    """Mean row of a metric CSV as {mIoU, mF1, mPrecision, mRecall}."""
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["class"] == "MEAN":
                return {"mIoU": float(row["IoU"]), "mF1": float(row["F1"]),
                        "mPrecision": float(row["Precision"]), "mRecall": float(row["Recall"])}
    raise ValueError(f"{path}: no MEAN row")


def _f(v: float) -> str:
    return "nan" if np.isnan(v) else f"{v:.6f}"
