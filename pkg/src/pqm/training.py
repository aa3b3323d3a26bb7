"""Augmentation fan-out, synthetic mask sources, and the training loop.

Each training sample is expanded into ``n_aug`` copies: a geometric
transform from the pool is applied to image and reference mask, the
matching edge map is re-derived, and an unchecked mask is produced by one
of the configured mask sources on the transformed image. The whole
pipeline is a pure function of (dataset, seed, epoch, sample index), so
runs with equal seeds produce identical loss trajectories.

Inference (:func:`assess`) never touches the pool or the sources.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from pqm.core import derive_quality_map, extract_edges
from pqm.data import SampleTriplet
from pqm.losses import (
    ClassWeights,
    LossBreakdown,
    edge_loss,
    reconstruction_losses,
    total_loss,
    weighted_ce,
)
from pqm.metrics import AssessmentReport, pooled_report
from pqm.model import QualityNet

# --- geometric transform pool -------------------------------------------------

POOL: tuple[str, ...] = ("identity", "rot90", "rot180", "rot270", "flip_h", "flip_v")

_INVERSE = {
    "identity": "identity",
    "rot90": "rot270",
    "rot180": "rot180",
    "rot270": "rot90",
    "flip_h": "flip_h",
    "flip_v": "flip_v",
}


def apply_transform(name: str, arr: np.ndarray) -> np.ndarray:
    """Apply an exact raster isometry to the last two axes.

    Rotations are clockwise. The result is a contiguous copy.
    """
    if name == "identity":
        out = arr.copy()
    elif name == "rot90":
        out = np.rot90(arr, k=-1, axes=(-2, -1))
    elif name == "rot180":
        out = np.rot90(arr, k=2, axes=(-2, -1))
    elif name == "rot270":
        out = np.rot90(arr, k=1, axes=(-2, -1))
    elif name == "flip_h":
        out = np.flip(arr, axis=-1)
    elif name == "flip_v":
        out = np.flip(arr, axis=-2)
    else:
        raise ValueError(f"unknown transform {name!r}; pool is {POOL}")
    return np.ascontiguousarray(out)


def inverse_transform(name: str) -> str:
    if name not in _INVERSE:
        raise ValueError(f"unknown transform {name!r}; pool is {POOL}")
    return _INVERSE[name]


# --- mask sources ----------------------------------------------------------------


class MaskSource:
    """Producer of unchecked masks for one (already transformed) sample.

    ``bind`` attaches per-sample context (the transformed reference mask
    and, when present, the transformed precomputed mask) and returns the
    source to call ``generate`` on; stateless sources return themselves.
    """

    name: str = "source"

    def bind(self, gt_mask: np.ndarray, unchecked: Optional[np.ndarray] = None) -> "MaskSource":
        return self

    def generate(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class PrecomputedMaskSource(MaskSource):
    """Serves the mask shipped with the sample (e.g. from a manifest)."""

    def __init__(self, name: str = "precomputed"):
        self.name = name
        self._mask: Optional[np.ndarray] = None

    def bind(self, gt_mask, unchecked=None):
        if unchecked is None:
            raise ValueError(f"source {self.name}: sample has no precomputed mask")
        bound = PrecomputedMaskSource(self.name)
        bound._mask = unchecked
        return bound

    def generate(self, image):
        if self._mask is None:
            raise ValueError(f"source {self.name}: bind() a sample first")
        if self._mask.shape != image.shape[-2:]:
            raise ValueError(f"source {self.name}: mask does not match image size")
        return self._mask.copy()


@dataclass(frozen=True)
class CorruptionSpec:
    """Deterministic degradation recipe for a synthetic mask source.

    ``dilate``/``erode`` are square-structuring-element radii,
    ``jitter`` randomizes a band of that radius around the boundary,
    ``drop_prob`` removes whole connected components, and ``blob_rate`` is
    the expected count of spurious foreground blobs added per mask.
    """

    dilate: int = 0
    erode: int = 0
    jitter: int = 0
    drop_prob: float = 0.0
    blob_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.dilate, self.erode, self.jitter) < 0:
            raise ValueError("corruption radii must be >= 0")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must be in [0, 1]")
        if self.blob_rate < 0:
            raise ValueError("blob_rate must be >= 0")


_SQUARE = np.ones((3, 3), dtype=bool)


def _square_dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0 or not mask.any():
        return mask.copy()
    return ndimage.binary_dilation(mask.astype(bool), structure=_SQUARE, iterations=radius).astype(np.uint8)


def _square_erode(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return mask.copy()
    return ndimage.binary_erosion(mask.astype(bool), structure=_SQUARE, iterations=radius, border_value=1).astype(np.uint8)


class SyntheticMaskSource(MaskSource):
    """Corrupts the bound reference mask by a fixed recipe.

    The RNG stream is derived from the recipe seed and a content hash of
    the image and bound mask, so generation is deterministic per
    (image, seed) and independent of call order.
    """

    def __init__(self, spec: CorruptionSpec, name: str = "synthetic"):
        self.spec = spec
        self.name = name
        self._gt: Optional[np.ndarray] = None

    def bind(self, gt_mask, unchecked=None):
        bound = SyntheticMaskSource(self.spec, self.name)
        bound._gt = np.asarray(gt_mask, dtype=np.uint8)
        return bound

    def _rng(self, image: np.ndarray) -> np.random.Generator:
        h = hashlib.blake2b(digest_size=8)
        h.update(np.ascontiguousarray(image).tobytes())
        h.update(self._gt.tobytes())
        return np.random.default_rng([self.spec.seed, int.from_bytes(h.digest(), "little")])

    def generate(self, image):
        if self._gt is None:
            raise ValueError(f"source {self.name}: bind() a sample first")
        spec = self.spec
        rng = self._rng(image)
        mask = self._gt.copy()
        if spec.drop_prob > 0 and mask.any():
            labels, n = ndimage.label(mask)
            keep = rng.random(n) >= spec.drop_prob
            mask = np.where(keep[labels - 1] & (labels > 0), mask, 0).astype(np.uint8)
        if spec.erode:
            mask = _square_erode(mask, spec.erode)
        if spec.dilate:
            mask = _square_dilate(mask, spec.dilate)
        if spec.jitter and mask.any() and not mask.all():
            band = _square_dilate(extract_edges(mask), spec.jitter).astype(bool)
            grown = _square_dilate(mask, spec.jitter)
            shrunk = _square_erode(mask, spec.jitter)
            coin = rng.random(mask.shape) < 0.5
            jittered = np.where(coin, grown, shrunk)
            mask = np.where(band, jittered, mask).astype(np.uint8)
        if spec.blob_rate > 0:
            h, w = mask.shape
            for _ in range(int(rng.poisson(spec.blob_rate))):
                half = int(rng.integers(1, 4))
                cy = int(rng.integers(0, h))
                cx = int(rng.integers(0, w))
                mask[max(0, cy - half): cy + half + 1, max(0, cx - half): cx + half + 1] = 1
        return mask


# --- augmented batches --------------------------------------------------------------


@dataclass(frozen=True)
class TrainerConfig:
    """Knobs of the supervised loop; defaults follow the reference recipe."""

    n_aug: int = 4
    learning_rate: float = 1e-4
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0
    batch_size: int = 1
    monitor: str = "mf1"  # or "miou"
    seg_source: str = "input_mask"

    def __post_init__(self):
        if self.n_aug < 1:
            raise ValueError("n_aug must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.patience < 0 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("patience/max_epochs/batch_size out of range")
        if self.monitor not in ("mf1", "miou"):
            raise ValueError("monitor must be 'mf1' or 'miou'")


@dataclass
class AugmentedBatch:
    """A transform/source fan-out of one or more samples.

    ``gt_quality`` and ``gt_edges`` are always consistent with the masks:
    gt_quality[i] == derive_quality_map(gt_masks[i], unchecked[i]) and
    gt_edges[i] == extract_edges(gt_masks[i]).
    """

    images: np.ndarray        # (N, 3, H, W) float32 in [0, 1]
    unchecked: np.ndarray     # (N, H, W) uint8
    gt_masks: np.ndarray      # (N, H, W) uint8
    gt_quality: np.ndarray    # (N, H, W) uint8 class ids
    gt_edges: np.ndarray      # (N, H, W) uint8
    provenance: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]


def image_chw_float(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 or (3, H, W) float -> (3, H, W) float32 in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[2] == 3 and arr.dtype == np.uint8:
        return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()
    if arr.ndim == 3 and arr.shape[0] == 3:
        return np.ascontiguousarray(arr, dtype=np.float32)
    raise ValueError(f"cannot interpret image with shape {arr.shape} / dtype {arr.dtype}")


def _draw_pairs(
    rng: np.random.Generator, pool: Sequence[str], sources: Sequence[MaskSource], n_aug: int
) -> list[tuple[str, MaskSource]]:
    """n_aug (transform, source) pairs without replacement.

    When both sets are large enough the transforms and the sources are each
    drawn without replacement (one transform paired with one source);
    otherwise distinct pairs are drawn from the full product.
    """
    if n_aug <= len(pool) and n_aug <= len(sources):
        t_idx = rng.choice(len(pool), size=n_aug, replace=False)
        s_idx = rng.choice(len(sources), size=n_aug, replace=False)
        return [(pool[int(t)], sources[int(s)]) for t, s in zip(t_idx, s_idx)]
    flat = rng.choice(len(pool) * len(sources), size=n_aug, replace=False)
    return [(pool[int(i) // len(sources)], sources[int(i) % len(sources)]) for i in flat]


def build_augmented_batch(
    sample: SampleTriplet,
    pool: Sequence[str],
    sources: Sequence[MaskSource],
    cfg: TrainerConfig,
    rng: np.random.Generator,
) -> AugmentedBatch:
    """Fan one sample out into ``cfg.n_aug`` transformed copies."""
    if not sources:
        raise ValueError("build_augmented_batch: no mask sources configured")
    for t in pool:
        if t not in POOL:
            raise ValueError(f"unknown transform {t!r} in pool")
    if cfg.n_aug > len(pool) * len(sources):
        raise ValueError(
            f"n_aug={cfg.n_aug} exceeds pool x sources = {len(pool)}x{len(sources)}"
        )
    image = image_chw_float(sample.image)
    images, unchecked, gts, quality, edges, provenance = [], [], [], [], [], []
    for t_name, source in _draw_pairs(rng, pool, sources, cfg.n_aug):
        img_t = apply_transform(t_name, image)
        gt_t = apply_transform(t_name, sample.gt_mask)
        unc_precomputed = (
            apply_transform(t_name, sample.unchecked) if sample.unchecked is not None else None
        )
        bound = source.bind(gt_t, unc_precomputed)
        s_t = np.asarray(bound.generate(img_t), dtype=np.uint8)
        if s_t.shape != gt_t.shape:
            raise ValueError(f"source {source.name} returned shape {s_t.shape}, want {gt_t.shape}")
        images.append(img_t)
        unchecked.append(s_t)
        gts.append(gt_t)
        quality.append(derive_quality_map(gt_t, s_t))
        edges.append(extract_edges(gt_t))
        provenance.append((t_name, source.name))
    return AugmentedBatch(
        images=np.stack(images),
        unchecked=np.stack(unchecked),
        gt_masks=np.stack(gts),
        gt_quality=np.stack(quality),
        gt_edges=np.stack(edges),
        provenance=provenance,
    )


def merge_batches(batches: Sequence[AugmentedBatch]) -> AugmentedBatch:
    if len(batches) == 1:
        return batches[0]
    return AugmentedBatch(
        images=np.concatenate([b.images for b in batches]),
        unchecked=np.concatenate([b.unchecked for b in batches]),
        gt_masks=np.concatenate([b.gt_masks for b in batches]),
        gt_quality=np.concatenate([b.gt_quality for b in batches]),
        gt_edges=np.concatenate([b.gt_edges for b in batches]),
        provenance=[p for b in batches for p in b.provenance],
    )


# --- optimization -----------------------------------------------------------------


def compute_batch_losses(
    model: QualityNet, batch: AugmentedBatch, weights: ClassWeights, seg_source: str
) -> LossBreakdown:
    images = torch.from_numpy(batch.images)
    unchecked = torch.from_numpy(batch.unchecked.astype(np.float32))
    gt_masks = torch.from_numpy(batch.gt_masks.astype(np.float32))
    gt_quality = torch.from_numpy(batch.gt_quality.astype(np.int64))
    gt_edges = torch.from_numpy(batch.gt_edges.astype(np.float32))
    out = model(images, unchecked)
    ce = weighted_ce(out.assessment, gt_quality, weights)
    edge = edge_loss(out.edge, gt_edges)
    probs = torch.softmax(out.assessment, dim=1)
    pos, neg, seg = reconstruction_losses(probs, unchecked, gt_masks, foreground_from=seg_source)
    return total_loss(ce, edge, pos, neg, seg)


def train_step(
    model: QualityNet,
    optimizer: torch.optim.Optimizer,
    batch: AugmentedBatch,
    weights: ClassWeights,
    seg_source: str = "input_mask",
) -> LossBreakdown:
    """One forward pass, one total-loss evaluation, one optimizer update.

    A non-finite loss aborts with the provenance of the offending batch.
    """
    model.train()
    try:
        breakdown = compute_batch_losses(model, batch, weights, seg_source)
    except ValueError as exc:
        if "non-finite" in str(exc):
            raise RuntimeError(
                f"non-finite loss on batch with provenance {batch.provenance}"
            ) from exc
        raise
    optimizer.zero_grad()
    breakdown.total.backward()
    optimizer.step()
    return breakdown.as_floats()


# --- inference and evaluation --------------------------------------------------------


def assess(model: QualityNet, image: np.ndarray, unchecked: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quality map (argmax over the 4 class channels) and thresholded edge
    map for one image/mask pair. Inputs must match the model's configured
    size; nothing is resampled silently."""
    img = image_chw_float(image)
    mask = np.asarray(unchecked, dtype=np.float32)
    size = model.cfg.image_size
    if img.shape[1:] != (size, size):
        raise ValueError(f"image is {img.shape[1:]}, model expects {(size, size)}")
    if mask.shape != (size, size):
        raise ValueError(f"mask is {mask.shape}, model expects {(size, size)}")
    model.eval()
    with torch.no_grad():
        out = model(torch.from_numpy(img).unsqueeze(0), torch.from_numpy(mask).unsqueeze(0))
        quality = out.assessment.argmax(dim=1)[0].numpy().astype(np.uint8)
        edges = (torch.sigmoid(out.edge)[0, 0] > 0.5).numpy().astype(np.uint8)
    return quality, edges


def evaluate_assessment(model: QualityNet, samples: Sequence[SampleTriplet]) -> AssessmentReport:
    """Pooled report of predicted vs derived quality maps over samples that
    carry unchecked masks."""
    pairs = []
    for s in samples:
        if s.unchecked is None:
            raise ValueError(f"sample {s.id} has no unchecked mask to assess")
        pred_q, _ = assess(model, s.image, s.unchecked)
        pairs.append((pred_q, derive_quality_map(s.gt_mask, s.unchecked)))
    return pooled_report(pairs)


# --- run configuration ------------------------------------------------------------


@dataclass
class TrainingSetup:
    """Everything a training run needs besides the data itself."""

    model_cfg: "ModelConfig"
    trainer_cfg: TrainerConfig
    pool: tuple[str, ...]
    sources: list[MaskSource]
    weights: ClassWeights
    val_manifest: Optional[str] = None
    val_fraction: float = 0.25


def parse_training_config(raw: dict) -> TrainingSetup:
    """Build a :class:`TrainingSetup` from nested key-value sections.

    Sections: ``model`` (ModelConfig fields), ``trainer`` (TrainerConfig
    fields), ``pool`` (transform names), ``sources`` (corruption recipes or
    ``type: precomputed``), ``class_weights`` (tp/fp/tn/fn), plus optional
    ``val_manifest`` / ``val_fraction``.
    """
    from pqm.backbone import ModelConfig

    model_raw = dict(raw.get("model", {}))
    for key in ("stage_depths", "pixel_mean", "pixel_std"):
        if key in model_raw:
            model_raw[key] = tuple(model_raw[key])
    model_cfg = ModelConfig(**model_raw)
    trainer_cfg = TrainerConfig(**raw.get("trainer", {}))
    pool = tuple(raw.get("pool", POOL))
    for t in pool:
        if t not in POOL:
            raise ValueError(f"config pool contains unknown transform {t!r}")
    sources: list[MaskSource] = []
    for i, src_raw in enumerate(raw.get("sources", [])):
        src_raw = dict(src_raw)
        name = src_raw.pop("name", f"source{i}")
        kind = src_raw.pop("type", "synthetic")
        if kind == "precomputed":
            if src_raw:
                raise ValueError(f"source {name}: precomputed sources take no parameters")
            sources.append(PrecomputedMaskSource(name))
        elif kind == "synthetic":
            sources.append(SyntheticMaskSource(CorruptionSpec(**src_raw), name))
        else:
            raise ValueError(f"source {name}: unknown type {kind!r}")
    cw = raw.get("class_weights", {})
    weights = ClassWeights(
        w_tp=float(cw.get("tp", 0.5)), w_fp=float(cw.get("fp", 5.0)),
        w_tn=float(cw.get("tn", 0.1)), w_fn=float(cw.get("fn", 5.0)),
    )
    val_fraction = float(raw.get("val_fraction", 0.25))
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    return TrainingSetup(
        model_cfg=model_cfg,
        trainer_cfg=trainer_cfg,
        pool=pool,
        sources=sources,
        weights=weights,
        val_manifest=raw.get("val_manifest"),
        val_fraction=val_fraction,
    )


def split_samples(samples: Sequence[SampleTriplet], val_fraction: float) -> SplitDataset:
    """Deterministic tail split preserving manifest order."""
    if len(samples) < 2:
        raise ValueError("need at least 2 samples to split train/val")
    n_val = max(1, int(round(len(samples) * val_fraction)))
    n_val = min(n_val, len(samples) - 1)
    return SplitDataset(train=list(samples[:-n_val]), val=list(samples[-n_val:]))


# --- the loop ---------------------------------------------------------------------


@dataclass
class SplitDataset:
    train: list[SampleTriplet]
    val: list[SampleTriplet]


@dataclass
class TrainResult:
    best_state: dict
    best_metric: float
    best_epoch: int
    epochs_run: int
    steps: int
    loss_history: list[tuple[int, LossBreakdown]]
    metric_history: list[float]


def _default_validation(
    model: QualityNet, val: Sequence[SampleTriplet], sources: Sequence[MaskSource], cfg: TrainerConfig
) -> AssessmentReport:
    samples = []
    for idx, s in enumerate(val):
        if s.unchecked is not None:
            samples.append(s)
            continue
        bound = sources[idx % len(sources)].bind(s.gt_mask, None)
        samples.append(replace_unchecked(s, bound.generate(image_chw_float(s.image))))
    return evaluate_assessment(model, samples)


def replace_unchecked(sample: SampleTriplet, unchecked: np.ndarray) -> SampleTriplet:
    return SampleTriplet(
        id=sample.id, image=sample.image, unchecked=np.asarray(unchecked, dtype=np.uint8),
        gt_mask=sample.gt_mask,
    )


def train_loop(
    model: QualityNet,
    dataset: SplitDataset,
    cfg: TrainerConfig,
    pool: Sequence[str] = POOL,
    sources: Sequence[MaskSource] = (),
    weights: ClassWeights = ClassWeights(),
    validate_fn: Optional[Callable[[QualityNet], float]] = None,
    loss_log: Optional[list[str]] = None,
    epoch_log: Optional[list[str]] = None,
) -> TrainResult:
    """Epochs of augmented batches with early stopping on a validation score.

    The monitored quantity is the validation mF1 of the quality map by
    default (``cfg.monitor`` switches to mIoU). Training stops once the
    score has failed to improve for more than ``cfg.patience`` consecutive
    epochs, and the best parameters are restored on the model.
    """
    if not dataset.train:
        raise ValueError("train_loop: empty training split")
    if not dataset.val and validate_fn is None:
        raise ValueError("train_loop: empty validation split")
    if validate_fn is None and not sources:
        raise ValueError("train_loop: no mask sources configured")

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    loss_history: list[tuple[int, LossBreakdown]] = []
    metric_history: list[float] = []
    best_metric = -float("inf")
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = -1
    stale = 0
    step = 0
    epochs_run = 0

    for epoch in range(cfg.max_epochs):
        pending: list[AugmentedBatch] = []
        for idx, sample in enumerate(dataset.train):
            rng = np.random.default_rng([cfg.seed, epoch, idx])
            pending.append(build_augmented_batch(sample, pool, sources, cfg, rng))
            if len(pending) == cfg.batch_size or idx == len(dataset.train) - 1:
                batch = merge_batches(pending)
                pending = []
                step += 1
                breakdown = train_step(model, optimizer, batch, weights, cfg.seg_source)
                loss_history.append((step, breakdown))
                if loss_log is not None:
                    loss_log.append(
                        f"{step}\t{breakdown.ce:.6f}\t{breakdown.edge:.6f}\t{breakdown.pos:.6f}"
                        f"\t{breakdown.neg:.6f}\t{breakdown.seg:.6f}\t{breakdown.total:.6f}"
                    )
        epochs_run = epoch + 1
        if validate_fn is not None:
            metric = float(validate_fn(model))
        else:
            report = _default_validation(model, dataset.val, sources, cfg)
            metric = report.mf1 if cfg.monitor == "mf1" else report.miou
        metric_history.append(metric)
        if epoch_log is not None:
            epoch_log.append(f"{epoch}\t{metric:.4f}")
        if metric > best_metric:
            best_metric = metric
            best_state = copy.deepcopy(model.state_dict())
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
        if stale > cfg.patience:
            break

    model.load_state_dict(best_state)
    return TrainResult(
        best_state=best_state,
        best_metric=best_metric,
        best_epoch=best_epoch,
        epochs_run=epochs_run,
        steps=step,
        loss_history=loss_history,
        metric_history=metric_history,
    )
