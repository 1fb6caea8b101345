"""Count-based IoU metrics.

TP/FP/FN are pooled per class over every record before taking the ratio
(dataset-level IoU), not averaged per image.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


@dataclass
class IoUResult:
    per_class: dict[int, float]
    miou: float
    fb_iou: float
    counts: dict[int, tuple[int, int, int]] = field(default_factory=dict)


def _binary(m) -> np.ndarray:
    a = np.asarray(m)
    if not np.isin(a, (0, 1)).all():
        raise ValueError("masks must be binary")
    return a.astype(bool)


class IoUAccumulator:
    """Streaming TP/FP/FN counts; merging two accumulators is exact."""

    def __init__(self):
        self.counts: dict[int, np.ndarray] = defaultdict(lambda: np.zeros(3, dtype=np.int64))
        self.fg = np.zeros(3, dtype=np.int64)
        self.bg = np.zeros(3, dtype=np.int64)

    def add(self, pred, gt, class_id: int) -> None:
        p, g = _binary(pred), _binary(gt)
        if p.shape != g.shape:
            raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
        tp = int(np.count_nonzero(p & g))
        fp = int(np.count_nonzero(p & ~g))
        fn = int(np.count_nonzero(~p & g))
        tn = p.size - tp - fp - fn
        self.counts[int(class_id)] += (tp, fp, fn)
        self.fg += (tp, fp, fn)
        # background IoU: roles of prediction and truth flip
        self.bg += (tn, fn, fp)

    def merge(self, other: "IoUAccumulator") -> None:
        for c, v in other.counts.items():
            self.counts[c] += v
        self.fg += other.fg
        self.bg += other.bg

    def result(self) -> IoUResult:
        per_class = {}
        for c in sorted(self.counts):
            tp, fp, fn = (int(x) for x in self.counts[c])
            if tp + fp + fn:
                per_class[c] = tp / (tp + fp + fn)
        miou = float(np.mean(list(per_class.values()))) if per_class else float("nan")
        fb = [_ratio(self.fg), _ratio(self.bg)]
        fb = [x for x in fb if x is not None]
        fb_iou = float(np.mean(fb)) if fb else float("nan")
        counts = {c: tuple(int(x) for x in v) for c, v in sorted(self.counts.items())}
        return IoUResult(per_class, miou, fb_iou, counts)


def _ratio(c: np.ndarray) -> float | None:
    tp, fp, fn = (int(x) for x in c)
    return tp / (tp + fp + fn) if tp + fp + fn else None


def iou_metrics(predictions: Iterable[tuple]) -> IoUResult:
    """``predictions``: iterable of (pred mask, gt mask, class_id)."""
    acc = IoUAccumulator()
    for pred, gt, class_id in predictions:
        acc.add(pred, gt, class_id)
    return acc.result()
