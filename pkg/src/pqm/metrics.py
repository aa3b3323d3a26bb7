"""Accuracy metrics for predicted quality maps and binary masks.

Per-class scores treat one quality class as foreground and everything else
as background, yielding a two-class confusion matrix from which precision,
recall, F1 and IoU follow. Degenerate 0/0 ratios are reported as explicit
``undefined`` flags and contribute 0 to the mF1/mIoU means, so aggregate
tables never carry NaNs. All score values are percentages.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from pqm.core import CLASS_ORDER, QualityClass, as_binary_mask, as_quality_map

REPORT_COLUMNS = (
    "F1_TP", "IoU_TP", "F1_FP", "IoU_FP",
    "F1_TN", "IoU_TN", "F1_FN", "IoU_FN",
    "mF1", "mIoU",
)


@dataclass(frozen=True)
class BinaryConfusion:
    """Pixel counts of a two-class confusion matrix."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "BinaryConfusion") -> "BinaryConfusion":
        return BinaryConfusion(
            self.tp + other.tp, self.fp + other.fp,
            self.fn + other.fn, self.tn + other.tn,
        )


@dataclass(frozen=True)
class ClassScores:
    """Precision/recall/F1/IoU percentages for one class.

    ``undefined`` names the ratios whose denominator was zero; their value
    is reported as 0.
    """

    precision: float
    recall: float
    f1: float
    iou: float
    undefined: frozenset[str] = frozenset()


@dataclass(frozen=True)
class AssessmentReport:
    """Per-class scores for the four quality classes plus their means."""

    per_class: Mapping[QualityClass, ClassScores]
    mf1: float
    miou: float


class Correlation(NamedTuple):
    """Sample Pearson coefficient; ``defined`` is False on zero variance."""

    r: float
    defined: bool


def per_class_confusion(pred_q, gt_q, c: QualityClass) -> BinaryConfusion:
    """Two-class confusion counts treating ``label == c`` as foreground."""
    p = as_quality_map(pred_q)
    g = as_quality_map(gt_q)
    if p.shape != g.shape:
        raise ValueError(f"per_class_confusion: shape mismatch {p.shape} vs {g.shape}")
    pc = p == c
    gc = g == c
    tp = int((pc & gc).sum())
    fp = int((pc & ~gc).sum())
    fn = int((~pc & gc).sum())
    tn = int((~pc & ~gc).sum())
    return BinaryConfusion(tp=tp, fp=fp, fn=fn, tn=tn)


def scores_from_confusion(cm: BinaryConfusion) -> ClassScores:
    """Precision, recall, F1 and IoU from confusion counts.

    F1 = 2TP/(2TP+FP+FN) and IoU = TP/(TP+FP+FN); each ratio with a zero
    denominator is flagged undefined and reported as 0.
    """
    undefined = set()

    def ratio(num: int, den: int, name: str) -> float:
        if den == 0:
            undefined.add(name)
            return 0.0
        return 100.0 * num / den

    precision = ratio(cm.tp, cm.tp + cm.fp, "precision")
    recall = ratio(cm.tp, cm.tp + cm.fn, "recall")
    f1 = ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn, "f1")
    iou = ratio(cm.tp, cm.tp + cm.fp + cm.fn, "iou")
    return ClassScores(precision, recall, f1, iou, frozenset(undefined))


def mean_class_scores(values: Sequence[float]) -> float:
    """Arithmetic mean over the four classes (undefined entries come in as 0)."""
    return float(sum(values)) / len(values)


def report_from_confusions(confusions: Mapping[QualityClass, BinaryConfusion]) -> AssessmentReport:
    """Build a report from (possibly accumulated) per-class confusion counts."""
    per_class = {c: scores_from_confusion(confusions[c]) for c in CLASS_ORDER}
    mf1 = mean_class_scores([per_class[c].f1 for c in CLASS_ORDER])
    miou = mean_class_scores([per_class[c].iou for c in CLASS_ORDER])
    return AssessmentReport(per_class=per_class, mf1=mf1, miou=miou)


def assessment_report(pred_q, gt_q) -> AssessmentReport:
    """Four per-class score sets plus their mF1/mIoU means for one map pair."""
    return report_from_confusions(
        {c: per_class_confusion(pred_q, gt_q, c) for c in CLASS_ORDER}
    )


def pooled_report(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> AssessmentReport:
    """Dataset-level report: confusion counts summed over all (pred, gt) pairs.

    This is the default aggregation; use :func:`mean_report` for per-image
    score averaging instead.
    """
    totals = {c: BinaryConfusion(0, 0, 0, 0) for c in CLASS_ORDER}
    n = 0
    for pred_q, gt_q in pairs:
        for c in CLASS_ORDER:
            totals[c] = totals[c] + per_class_confusion(pred_q, gt_q, c)
        n += 1
    if n == 0:
        raise ValueError("pooled_report: no map pairs given")
    return report_from_confusions(totals)


def mean_report(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> AssessmentReport:
    """Per-image averaging: score each pair, then average every field."""
    reports = [assessment_report(p, g) for p, g in pairs]
    if not reports:
        raise ValueError("mean_report: no map pairs given")
    per_class = {}
    for c in CLASS_ORDER:
        per_class[c] = ClassScores(
            precision=float(np.mean([r.per_class[c].precision for r in reports])),
            recall=float(np.mean([r.per_class[c].recall for r in reports])),
            f1=float(np.mean([r.per_class[c].f1 for r in reports])),
            iou=float(np.mean([r.per_class[c].iou for r in reports])),
        )
    return AssessmentReport(
        per_class=per_class,
        mf1=float(np.mean([r.mf1 for r in reports])),
        miou=float(np.mean([r.miou for r in reports])),
    )


def mask_iou_counts(pred, gt) -> tuple[int, int, int, int]:
    """(fg intersection, fg union, bg intersection, bg union) pixel counts."""
    p = as_binary_mask(pred).astype(bool)
    g = as_binary_mask(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask_miou: shape mismatch {p.shape} vs {g.shape}")
    fg_i = int((p & g).sum())
    fg_u = int((p | g).sum())
    bg_i = int((~p & ~g).sum())
    bg_u = int((~p | ~g).sum())
    return fg_i, fg_u, bg_i, bg_u


def miou_from_counts(fg_i: int, fg_u: int, bg_i: int, bg_u: int) -> float:
    """Mean of foreground and background IoU; empty unions contribute 0."""
    fg = 100.0 * fg_i / fg_u if fg_u else 0.0
    bg = 100.0 * bg_i / bg_u if bg_u else 0.0
    return (fg + bg) / 2.0


def mask_miou(pred, gt) -> float:
    """Mean IoU (percentage) of a binary mask pair over both classes."""
    return miou_from_counts(*mask_iou_counts(pred, gt))


def pearson_correlation(x, y) -> Correlation:
    """Sample Pearson correlation coefficient of two equal-length series."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.ndim != 1 or ya.ndim != 1:
        raise ValueError("pearson_correlation expects 1-D series")
    if xa.shape != ya.shape:
        raise ValueError(f"pearson_correlation: length mismatch {xa.shape} vs {ya.shape}")
    if xa.size < 2:
        raise ValueError("pearson_correlation needs at least 2 points")
    dx = xa - xa.mean()
    dy = ya - ya.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        return Correlation(0.0, False)
    r = float(np.dot(dx, dy) / np.sqrt(sxx * syy))
    return Correlation(r, True)


def format_report(report: AssessmentReport) -> str:
    """Two-line tab-delimited table with the fixed column order, 2 decimals."""
    pc = report.per_class
    values = [
        pc[QualityClass.TP].f1, pc[QualityClass.TP].iou,
        pc[QualityClass.FP].f1, pc[QualityClass.FP].iou,
        pc[QualityClass.TN].f1, pc[QualityClass.TN].iou,
        pc[QualityClass.FN].f1, pc[QualityClass.FN].iou,
        report.mf1, report.miou,
    ]
    header = "\t".join(REPORT_COLUMNS)
    row = "\t".join(f"{v:.2f}" for v in values)
    return header + "\n" + row
