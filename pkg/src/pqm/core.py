"""Label algebra for four-class segmentation quality maps.

Conventions used throughout the package:

* a binary mask is an ``(H, W)`` numpy array over ``{0, 1}``;
* a quality map is an ``(H, W)`` numpy array of :class:`QualityClass` ids,
  exactly one class per pixel;
* an edge map is an ``(H, W)`` binary array marking one-pixel-wide inner
  object boundaries.

All functions are pure; they never mutate their inputs and hold no state,
so they are safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple

import numpy as np
from scipy import ndimage


class QualityClass(IntEnum):
    """Per-pixel verdict on an unchecked mask. Values double as channel
    indices of assessment logits/probabilities."""

    TP = 0
    FP = 1
    TN = 2
    FN = 3


CLASS_ORDER: tuple[QualityClass, ...] = (
    QualityClass.TP,
    QualityClass.FP,
    QualityClass.TN,
    QualityClass.FN,
)

# 4-neighbourhood structuring element for the inner-boundary erosion.
_CROSS = ndimage.generate_binary_structure(2, 1)


class EibResult(NamedTuple):
    """Error-in-buffer percentage plus a flag for the empty-error case.

    ``defined`` is False when the map contains no error pixels at all, in
    which case ``percentage`` is reported as 0 so that aggregate tables
    never carry NaNs.
    """

    percentage: float
    defined: bool


@dataclass(frozen=True)
class ClassDistribution:
    """Pixel percentage of each quality class; the four fields sum to 100."""

    pct_tp: float
    pct_fp: float
    pct_tn: float
    pct_fn: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.pct_tp, self.pct_fp, self.pct_tn, self.pct_fn)


def as_binary_mask(arr) -> np.ndarray:
    """Validate and convert ``arr`` to a uint8 {0,1} mask.

    Raises ValueError for non-2D input, empty axes, or values outside {0,1}.
    """
    a = np.asarray(arr)
    if a.ndim != 2:
        raise ValueError(f"binary mask must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"binary mask must be at least 1x1, got {a.shape}")
    if a.dtype == bool:
        return a.astype(np.uint8)
    out = a.astype(np.uint8, copy=True)
    if not np.array_equal(out, a) or out.max(initial=0) > 1:
        raise ValueError("binary mask values must all be 0 or 1")
    return out


def as_quality_map(arr) -> np.ndarray:
    """Validate and convert ``arr`` to a uint8 quality map of class ids."""
    a = np.asarray(arr)
    if a.ndim != 2:
        raise ValueError(f"quality map must be 2-D, got shape {a.shape}")
    out = a.astype(np.uint8, copy=True)
    if not np.array_equal(out, a) or out.max(initial=0) > 3:
        raise ValueError("quality map values must be class ids in 0..3")
    return out


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def derive_quality_map(gt, pred) -> np.ndarray:
    """Classify every pixel of ``pred`` against ``gt``.

    (pred=1, gt=1) -> TP, (pred=1, gt=0) -> FP,
    (pred=0, gt=0) -> TN, (pred=0, gt=1) -> FN.
    """
    g = as_binary_mask(gt)
    p = as_binary_mask(pred)
    _check_same_shape(g, p, "derive_quality_map")
    q = np.empty(g.shape, dtype=np.uint8)
    q[(p == 1) & (g == 1)] = QualityClass.TP
    q[(p == 1) & (g == 0)] = QualityClass.FP
    q[(p == 0) & (g == 0)] = QualityClass.TN
    q[(p == 0) & (g == 1)] = QualityClass.FN
    return q


def reconstruct_masks(q) -> tuple[np.ndarray, np.ndarray]:
    """Invert :func:`derive_quality_map`: returns ``(gt, pred)`` exactly.

    gt is 1 on {TP, FN}; pred is 1 on {TP, FP}.
    """
    qa = as_quality_map(q)
    gt = ((qa == QualityClass.TP) | (qa == QualityClass.FN)).astype(np.uint8)
    pred = ((qa == QualityClass.TP) | (qa == QualityClass.FP)).astype(np.uint8)
    return gt, pred


def quality_indicators(q) -> dict[QualityClass, np.ndarray]:
    """Per-class {0,1} indicator maps; pairwise disjoint, union covers all."""
    qa = as_quality_map(q)
    return {c: (qa == c).astype(np.uint8) for c in CLASS_ORDER}


def extract_edges(mask) -> np.ndarray:
    """One-pixel-wide inner boundary of a binary mask.

    Computed as ``mask AND NOT erode(mask)`` with a 3x3 cross (4-neighbour)
    structuring element and the outside of the image treated as background,
    so foreground pixels touching the image border are edges.
    """
    m = as_binary_mask(mask).astype(bool)
    eroded = ndimage.binary_erosion(m, structure=_CROSS, border_value=0)
    return (m & ~eroded).astype(np.uint8)


def edge_buffer(edges, k: int) -> np.ndarray:
    """All pixels within Chebyshev distance ``k`` of an edge pixel.

    Equivalent to dilation by a (2k+1)x(2k+1) square; k=0 returns the edge
    map unchanged.
    """
    e = as_binary_mask(edges).astype(bool)
    if k < 0:
        raise ValueError(f"buffer radius must be >= 0, got {k}")
    if k == 0 or not e.any():
        return e.astype(np.uint8)
    out = ndimage.binary_dilation(e, structure=np.ones((3, 3), bool), iterations=k)
    return out.astype(np.uint8)


def eib_at_k(q, gt_edges, k: int, *, edge_source_buffer: np.ndarray | None = None) -> EibResult:
    """Percentage of error pixels (FP or FN) within ``k`` of the given edges.

    The buffer is taken around ``gt_edges`` (boundaries of the reference
    mask); callers that want a different edge source simply pass a
    different edge map, or a precomputed ``edge_source_buffer`` directly.
    Returns ``(0.0, defined=False)`` when the map has no error pixels.
    """
    qa = as_quality_map(q)
    e = as_binary_mask(gt_edges)
    _check_same_shape(qa, e, "eib_at_k")
    errors = (qa == QualityClass.FP) | (qa == QualityClass.FN)
    n_err = int(errors.sum())
    if n_err == 0:
        return EibResult(0.0, False)
    buf = edge_buffer(e, k) if edge_source_buffer is None else as_binary_mask(edge_source_buffer)
    inside = int((errors & buf.astype(bool)).sum())
    return EibResult(100.0 * inside / n_err, True)


def class_distribution(q) -> ClassDistribution:
    """Pixel percentage of each quality class over the whole map."""
    qa = as_quality_map(q)
    total = qa.size
    counts = np.bincount(qa.ravel(), minlength=4)
    pct = counts * 100.0 / total
    return ClassDistribution(
        pct_tp=float(pct[QualityClass.TP]),
        pct_fp=float(pct[QualityClass.FP]),
        pct_tn=float(pct[QualityClass.TN]),
        pct_fn=float(pct[QualityClass.FN]),
    )
