"""Raster IO, dataset manifests, tiling and dataset-level statistics.

Masks serialize as single-channel 8-bit rasters with 0 = background and
255 = foreground; any nonzero value thresholds to 1 on load. Quality maps
serialize as paletted 8-bit rasters with indices 0=TN, 1=TP, 2=FP, 3=FN
and render to RGB as TP=red, FP=green, TN=blue, FN=cyan.

Manifests are line-oriented text: ``id<TAB>image<TAB>unchecked|-<TAB>gt``
with paths resolved relative to the manifest file.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from pqm.core import (
    ClassDistribution,
    EibResult,
    QualityClass,
    as_binary_mask,
    as_quality_map,
    derive_quality_map,
    edge_buffer,
    extract_edges,
)
from pqm.metrics import mask_iou_counts, miou_from_counts

# palette index per quality class and its display colour
PALETTE_INDEX = {
    QualityClass.TN: 0,
    QualityClass.TP: 1,
    QualityClass.FP: 2,
    QualityClass.FN: 3,
}
CLASS_COLORS = {
    QualityClass.TP: (255, 0, 0),
    QualityClass.FP: (0, 255, 0),
    QualityClass.TN: (0, 0, 255),
    QualityClass.FN: (0, 255, 255),
}

_CLASS_TO_INDEX = np.zeros(4, dtype=np.uint8)
_INDEX_TO_CLASS = np.zeros(4, dtype=np.uint8)
for _c, _i in PALETTE_INDEX.items():
    _CLASS_TO_INDEX[_c] = _i
    _INDEX_TO_CLASS[_i] = _c


@dataclass
class SampleTriplet:
    """One dataset unit: image, optional unchecked mask, reference mask.

    ``image`` is (H, W, 3) uint8; both masks are (H, W) over {0, 1}.
    """

    id: str
    image: np.ndarray
    unchecked: Optional[np.ndarray]
    gt_mask: np.ndarray

    def validate(self) -> "SampleTriplet":
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"sample {self.id}: image must be (H, W, 3), got {self.image.shape}")
        hw = self.image.shape[:2]
        self.gt_mask = as_binary_mask(self.gt_mask)
        if self.gt_mask.shape != hw:
            raise ValueError(
                f"sample {self.id}: reference mask {self.gt_mask.shape} does not match image {hw}"
            )
        if self.unchecked is not None:
            self.unchecked = as_binary_mask(self.unchecked)
            if self.unchecked.shape != hw:
                raise ValueError(
                    f"sample {self.id}: unchecked mask {self.unchecked.shape} does not match image {hw}"
                )
        return self


# --- raster codecs -----------------------------------------------------------


def load_image(path) -> np.ndarray:
    """RGB image as (H, W, 3) uint8."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def save_image(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path)


def load_mask(path) -> np.ndarray:
    """Binary mask from an 8-bit raster; any nonzero pixel becomes 1."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr > 0).astype(np.uint8)


def save_mask(path, mask) -> None:
    m = as_binary_mask(mask)
    Image.fromarray((m * 255).astype(np.uint8), mode="L").save(path)


def _palette_bytes() -> list[int]:
    flat = [0] * (256 * 3)
    for cls, idx in PALETTE_INDEX.items():
        r, g, b = CLASS_COLORS[cls]
        flat[3 * idx: 3 * idx + 3] = [r, g, b]
    return flat


def save_quality_map(path, q) -> None:
    """Paletted 8-bit raster with indices 0=TN, 1=TP, 2=FP, 3=FN."""
    qa = as_quality_map(q)
    img = Image.fromarray(_CLASS_TO_INDEX[qa], mode="P")
    img.putpalette(_palette_bytes())
    img.save(path)


def load_quality_map(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode != "P":
            raise ValueError(f"{path}: quality maps must be paletted rasters, got mode {img.mode}")
        idx = np.asarray(img, dtype=np.uint8)
    if idx.max(initial=0) > 3:
        raise ValueError(f"{path}: palette index out of range")
    return _INDEX_TO_CLASS[idx]


def render_quality_map(q) -> np.ndarray:
    """Quality map as an (H, W, 3) uint8 RGB raster."""
    qa = as_quality_map(q)
    lut = np.zeros((4, 3), dtype=np.uint8)
    for cls, color in CLASS_COLORS.items():
        lut[cls] = color
    return lut[qa]


def decode_rendered_quality(rgb: np.ndarray) -> np.ndarray:
    """Invert :func:`render_quality_map`; rejects colours outside the palette."""
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) RGB, got {arr.shape}")
    packed = (
        arr[..., 0].astype(np.int64) << 16
    ) | (arr[..., 1].astype(np.int64) << 8) | arr[..., 2].astype(np.int64)
    out = np.full(arr.shape[:2], 255, dtype=np.uint8)
    for cls, (r, g, b) in CLASS_COLORS.items():
        out[packed == ((r << 16) | (g << 8) | b)] = cls
    if (out == 255).any():
        raise ValueError("raster contains colours outside the quality-map palette")
    return out


# --- manifests ------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: Path
    unchecked_path: Optional[Path]
    gt_path: Path


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a tab-separated manifest; order is preserved."""
    path = Path(path)
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        sid, image, unchecked, gt = parts
        if sid in seen:
            raise ValueError(f"{path}:{lineno}: duplicate sample id {sid!r}")
        seen.add(sid)
        entry = ManifestEntry(
            id=sid,
            image_path=root / image,
            unchecked_path=None if unchecked == "-" else root / unchecked,
            gt_path=root / gt,
        )
        for p in (entry.image_path, entry.unchecked_path, entry.gt_path):
            if p is not None and not p.exists():
                raise ValueError(f"{path}:{lineno}: missing file {p}")
        entries.append(entry)
    return DatasetManifest(root=root, entries=entries)


def load_sample(entry: ManifestEntry) -> SampleTriplet:
    return SampleTriplet(
        id=entry.id,
        image=load_image(entry.image_path),
        unchecked=None if entry.unchecked_path is None else load_mask(entry.unchecked_path),
        gt_mask=load_mask(entry.gt_path),
    ).validate()


def load_samples(manifest: DatasetManifest) -> list[SampleTriplet]:
    return [load_sample(e) for e in manifest.entries]


# --- tiling ---------------------------------------------------------------------


def tile_dataset(
    image: np.ndarray,
    gt_mask: np.ndarray,
    tile: int,
    unchecked: Optional[np.ndarray] = None,
    drop_empty: bool = False,
    id_prefix: str = "tile",
) -> list[SampleTriplet]:
    """Cut a raster into a non-overlapping grid of tile x tile samples.

    Residual margins are dropped. With ``drop_empty``, tiles whose
    reference mask is all background are discarded.
    """
    img = np.asarray(image)
    gt = as_binary_mask(gt_mask)
    if img.shape[:2] != gt.shape:
        raise ValueError(f"image {img.shape[:2]} and mask {gt.shape} disagree")
    h, w = gt.shape
    if tile < 1 or tile > min(h, w):
        raise ValueError(f"tile size {tile} does not fit a {h}x{w} raster")
    unc = None if unchecked is None else as_binary_mask(unchecked)
    if unc is not None and unc.shape != gt.shape:
        raise ValueError("unchecked mask shape mismatch")
    out: list[SampleTriplet] = []
    for r in range(h // tile):
        for c in range(w // tile):
            ys = slice(r * tile, (r + 1) * tile)
            xs = slice(c * tile, (c + 1) * tile)
            gt_t = gt[ys, xs]
            if drop_empty and not gt_t.any():
                continue
            out.append(
                SampleTriplet(
                    id=f"{id_prefix}_r{r:03d}_c{c:03d}",
                    image=img[ys, xs].copy(),
                    unchecked=None if unc is None else unc[ys, xs].copy(),
                    gt_mask=gt_t.copy(),
                )
            )
    return out


# --- dataset statistics -----------------------------------------------------------


@dataclass(frozen=True)
class DatasetStats:
    """Pooled statistics over a manifest: class distribution of the derived
    quality maps, error-in-buffer percentage at radius k, and mean IoU of
    the unchecked masks against the reference."""

    n_samples: int
    distribution: ClassDistribution
    eib: EibResult
    eib_k: int
    mask_miou: float


def dataset_stats(samples: list[SampleTriplet], k: int = 3) -> DatasetStats:
    """Aggregate stats over all samples (pixel-count pooling).

    Every sample must carry an unchecked mask; offenders are reported by id.
    """
    if not samples:
        raise ValueError("dataset_stats: no samples")
    missing = [s.id for s in samples if s.unchecked is None]
    if missing:
        raise ValueError(f"dataset_stats: samples without unchecked masks: {', '.join(missing)}")
    class_counts = np.zeros(4, dtype=np.int64)
    err_total = 0
    err_in_buffer = 0
    iou_counts = np.zeros(4, dtype=np.int64)
    for s in samples:
        q = derive_quality_map(s.gt_mask, s.unchecked)
        class_counts += np.bincount(q.ravel(), minlength=4)
        errors = (q == QualityClass.FP) | (q == QualityClass.FN)
        err_total += int(errors.sum())
        if errors.any():
            buf = edge_buffer(extract_edges(s.gt_mask), k)
            err_in_buffer += int((errors & buf.astype(bool)).sum())
        iou_counts += np.array(mask_iou_counts(s.unchecked, s.gt_mask), dtype=np.int64)
    total = int(class_counts.sum())
    pct = class_counts * 100.0 / total
    eib = (
        EibResult(100.0 * err_in_buffer / err_total, True)
        if err_total
        else EibResult(0.0, False)
    )
    return DatasetStats(
        n_samples=len(samples),
        distribution=ClassDistribution(
            pct_tp=float(pct[QualityClass.TP]),
            pct_fp=float(pct[QualityClass.FP]),
            pct_tn=float(pct[QualityClass.TN]),
            pct_fn=float(pct[QualityClass.FN]),
        ),
        eib=eib,
        eib_k=k,
        mask_miou=miou_from_counts(*iou_counts),
    )


def format_dataset_stats(stats: DatasetStats) -> str:
    """Tab-separated key/value table, percentages with two decimals."""
    d = stats.distribution
    lines = [
        f"samples\t{stats.n_samples}",
        f"pct_TP\t{d.pct_tp:.2f}",
        f"pct_FP\t{d.pct_fp:.2f}",
        f"pct_TN\t{d.pct_tn:.2f}",
        f"pct_FN\t{d.pct_fn:.2f}",
        f"EIB@{stats.eib_k}\t{stats.eib.percentage:.2f}" + ("" if stats.eib.defined else "\tundefined"),
        f"mask_mIoU\t{stats.mask_miou:.2f}",
    ]
    return "\n".join(lines)
