"""Pixel-wise four-class quality assessment of binary segmentation masks.

Given an image and an unchecked segmentation mask, the package predicts a
per-pixel quality map labelling every pixel as TP, FP, TN or FN against an
(unknown at inference time) ground truth. It ships the label algebra for
such quality maps, evaluation metrics, a promptable encoder-decoder network
with an edge-guided refinement branch, the composite training objective,
an augmentation-based training loop, and a small CLI.
"""

from pqm.core import (
    ClassDistribution,
    EibResult,
    QualityClass,
    class_distribution,
    derive_quality_map,
    edge_buffer,
    eib_at_k,
    extract_edges,
    quality_indicators,
    reconstruct_masks,
)
from pqm.metrics import (
    AssessmentReport,
    BinaryConfusion,
    ClassScores,
    assessment_report,
    mask_miou,
    pearson_correlation,
    per_class_confusion,
    scores_from_confusion,
)

__version__ = "0.1.0"

__all__ = [
    "QualityClass",
    "ClassDistribution",
    "EibResult",
    "derive_quality_map",
    "reconstruct_masks",
    "quality_indicators",
    "extract_edges",
    "edge_buffer",
    "eib_at_k",
    "class_distribution",
    "BinaryConfusion",
    "ClassScores",
    "AssessmentReport",
    "per_class_confusion",
    "scores_from_confusion",
    "assessment_report",
    "mask_miou",
    "pearson_correlation",
    "__version__",
]
