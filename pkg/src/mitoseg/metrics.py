"""Voxel-level segmentation scores computed over whole volumes.

Counts are summed over every slice before any ratio is formed, so a volume
score is not the mean of per-slice scores.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

REPORT_KEYS = ("accuracy", "precision", "recall", "pr_auc", "fg_iou", "bg_iou", "overall_iou", "threshold")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def _binary(a: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != bool:
        if not np.isin(a, (0, 1)).all():
            raise ValueError(f"{what} must be binary (0/1)")
        a = a.astype(bool)
    return a


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    p, g = _binary(pred, "prediction"), _binary(gt, "ground truth")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def fg_iou(c: ConfusionCounts) -> float:
    """Jaccard index of the foreground; 1.0 when neither volume has foreground."""
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def bg_iou(c: ConfusionCounts) -> float:
    denom = c.tn + c.fp + c.fn
    return 1.0 if denom == 0 else c.tn / denom


def overall_iou(c: ConfusionCounts) -> float:
    return (fg_iou(c) + bg_iou(c)) / 2


def accuracy(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total if c.total else 1.0


def precision(c: ConfusionCounts) -> float:
    # nothing predicted positive: no false alarms
    return 1.0 if c.tp + c.fp == 0 else c.tp / (c.tp + c.fp)


def recall(c: ConfusionCounts) -> float:
    return 1.0 if c.tp + c.fn == 0 else c.tp / (c.tp + c.fn)


def fg_iou_lower_bound(iou: float) -> float:
    """Foreground IoU implied by an overall IoU when only the latter is known.

    IoU_fg = 2 IoU - IoU_bg >= 2 IoU - 1 since IoU_bg <= 1. Rounded to
    1e-12 to keep decimal inputs decimal (0.948 -> 0.896, not 0.8959999...).
    """
    if not 0 <= iou <= 1:
        raise ValueError(f"IoU must be in [0, 1], got {iou}")
    return round(2 * iou - 1, 12)


@dataclass(frozen=True)
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    auc: float | None  # None when the ground truth holds a single class


def pr_curve(probs: np.ndarray, gt: np.ndarray, n_thresholds: int = 256,
             thresholds: np.ndarray | None = None) -> PRCurve:
    """Precision/recall at evenly spaced thresholds (``p >= t`` is positive), trapezoid AUC over recall."""
    probs = np.asarray(probs, dtype=np.float64).ravel()
    g = _binary(gt, "ground truth").ravel()
    if probs.shape != g.shape:
        raise ValueError(f"probability shape {np.shape(probs)} != ground-truth shape {np.shape(gt)}")
    if thresholds is None:
        thresholds = np.linspace(0.0, 1.0, n_thresholds)
    thresholds = np.asarray(thresholds, dtype=np.float64)

    # counts of positives / negatives with p >= t, via sorted cumulative counts
    order = np.argsort(probs, kind="stable")
    sp, sg = probs[order], g[order]
    pos_total = int(sg.sum())
    neg_total = sg.size - pos_total
    pos_below = np.concatenate([[0], np.cumsum(sg)])
    idx = np.searchsorted(sp, thresholds, side="left")
    tp = pos_total - pos_below[idx]
    fp = (sg.size - idx) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 1.0)
        rec = tp / pos_total if pos_total else np.full(thresholds.shape, np.nan)

    auc = None
    if pos_total and neg_total:
        # anchor at (recall 0, precision 1) so a curve that never drops below
        # full recall still spans the recall axis
        o = np.lexsort((-prec, rec))
        r = np.concatenate([[0.0], rec[o]])
        p = np.concatenate([[1.0], prec[o]])
        auc = float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2))
    return PRCurve(thresholds, prec, rec, auc)


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    precision: float
    recall: float
    pr_auc: float | None
    fg_iou: float
    bg_iou: float
    overall_iou: float
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = []
        for k in REPORT_KEYS:
            v = getattr(self, k)
            lines.append(f"{k}={'undefined' if v is None else format(v, '.6f')}")
        return "\n".join(lines) + "\n"

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        txt, js = stem.with_suffix(".txt"), stem.with_suffix(".json")
        txt.write_text(self.to_text())
        js.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return txt, js


def evaluate(pred_mask: np.ndarray, gt: np.ndarray, probs: np.ndarray | None = None,
             threshold: float = 0.5, n_thresholds: int = 256) -> EvalReport:
    """Volume-level report; ``pred_mask`` is the binary decision, ``probs`` feeds the PR-AUC."""
    c = confusion(pred_mask, gt)
    auc = pr_curve(probs, gt, n_thresholds).auc if probs is not None else None
    if auc is not None and math.isnan(auc):
        auc = None
    return EvalReport(
        accuracy=accuracy(c), precision=precision(c), recall=recall(c), pr_auc=auc,
        fg_iou=fg_iou(c), bg_iou=bg_iou(c), overall_iou=overall_iou(c), threshold=float(threshold),
    )
