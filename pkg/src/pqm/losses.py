"""The five-term training objective for quality-map prediction.

total = weighted 4-class cross-entropy on the assessment logits
      + edge loss (class-balanced BCE + global soft Dice) on the edge logits
      + three mask-reconstruction consistency penalties tying the predicted
        class probabilities back to the reference mask.

All terms are plain functions of tensors and differentiable end to end.
Inputs may be ``(C, H, W)`` or batched ``(B, C, H, W)``; unbatched input is
treated as a batch of one. Probabilities are clamped to
``[1e-7, 1 - 1e-7]`` before any logarithm.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import torch

PROB_EPS = 1e-7
DICE_EPS = 1e-6


@dataclass(frozen=True)
class ClassWeights:
    """Per-class weights for the 4-class cross-entropy, countering the
    heavy TP/TN vs FP/FN imbalance. Order matches the logit channels."""

    w_tp: float = 0.5
    w_fp: float = 5.0
    w_tn: float = 0.1
    w_fn: float = 5.0

    def __post_init__(self):
        vals = (self.w_tp, self.w_fp, self.w_tn, self.w_fn)
        if min(vals) < 0:
            raise ValueError("class weights must be non-negative")
        if max(vals) == 0:
            raise ValueError("at least one class weight must be positive")

    def as_tensor(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.tensor(
            [self.w_tp, self.w_fp, self.w_tn, self.w_fn], dtype=dtype, device=device
        )


@dataclass(frozen=True)
class LossBreakdown:
    """The five loss terms and their (unweighted) sum. Fields keep whatever
    numeric type they were built from, so tensors stay differentiable."""

    ce: object
    edge: object
    pos: object
    neg: object
    seg: object
    total: object

    def as_floats(self) -> "LossBreakdown":
        def f(v):
            return float(v.detach()) if torch.is_tensor(v) else float(v)

        return LossBreakdown(
            ce=f(self.ce), edge=f(self.edge), pos=f(self.pos),
            neg=f(self.neg), seg=f(self.seg), total=f(self.total),
        )


def _batched(x: torch.Tensor, channels: int, name: str) -> torch.Tensor:
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != channels:
        raise ValueError(f"{name}: expected ({channels}, H, W) or (B, {channels}, H, W), got {tuple(x.shape)}")
    return x


def _batched_map(x: torch.Tensor, name: str) -> torch.Tensor:
    if x.dim() == 2:
        x = x.unsqueeze(0)
    if x.dim() != 3:
        raise ValueError(f"{name}: expected (H, W) or (B, H, W), got {tuple(x.shape)}")
    return x


def _require_finite(x: torch.Tensor, name: str) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")


def weighted_ce(logits: torch.Tensor, gt_q: torch.Tensor, weights: ClassWeights) -> torch.Tensor:
    """Mean over pixels of ``-w[c] * log p[c]`` at each pixel's true class.

    ``logits`` is (B, 4, H, W); ``gt_q`` holds integer class ids (B, H, W).
    """
    logits = _batched(logits, 4, "weighted_ce logits")
    _require_finite(logits, "weighted_ce logits")
    gt = _batched_map(gt_q, "weighted_ce gt").long()
    if gt.shape != (logits.shape[0], logits.shape[2], logits.shape[3]):
        raise ValueError(f"weighted_ce: logits {tuple(logits.shape)} vs labels {tuple(gt.shape)}")
    probs = torch.softmax(logits, dim=1).clamp(PROB_EPS, 1.0 - PROB_EPS)
    p_true = probs.gather(1, gt.unsqueeze(1)).squeeze(1)
    w = weights.as_tensor(dtype=logits.dtype, device=logits.device)[gt]
    return (-w * torch.log(p_true)).mean()


def edge_pixel_weights(edge_gt: torch.Tensor, neg_scale: float = 1.1) -> torch.Tensor:
    """Per-pixel BCE weights balancing sparse edge pixels against background.

    With ``n+`` / ``n-`` the per-image counts of edge and background pixels:
    edge pixels get ``n- / (n+ + n-)``, background pixels get
    ``neg_scale * n+ / (n+ + n-)``.
    """
    gt = _batched_map(edge_gt, "edge_pixel_weights").to(torch.float64)
    total = gt[0].numel()
    n_pos = gt.sum(dim=(1, 2), keepdim=True)
    n_neg = total - n_pos
    w_edge = n_neg / total
    w_bg = neg_scale * n_pos / total
    gamma = torch.where(gt > 0.5, w_edge, w_bg)
    return gamma.squeeze(0) if edge_gt.dim() == 2 else gamma


def edge_loss(
    e_logits: torch.Tensor,
    edge_gt: torch.Tensor,
    neg_scale: float = 1.1,
    eps: float = DICE_EPS,
) -> torch.Tensor:
    """Class-balanced BCE plus global soft Dice on the fused edge prediction.

    The Dice overlap is computed from per-image global sums, then averaged
    over the batch.
    """
    e_logits = _batched(e_logits, 1, "edge_loss logits")
    _require_finite(e_logits, "edge_loss logits")
    gt = _batched_map(edge_gt, "edge_loss gt").to(e_logits.dtype)
    if gt.shape != (e_logits.shape[0], e_logits.shape[2], e_logits.shape[3]):
        raise ValueError(f"edge_loss: logits {tuple(e_logits.shape)} vs edges {tuple(gt.shape)}")
    e = torch.sigmoid(e_logits.squeeze(1))
    e_log = e.clamp(PROB_EPS, 1.0 - PROB_EPS)  # clamp only under the logarithms
    gamma = edge_pixel_weights(gt, neg_scale).to(e.dtype)
    bce = -gamma * ((1.0 - gt) * torch.log(1.0 - e_log) + gt * torch.log(e_log))
    bce_term = bce.mean()
    inter = (e * gt).sum(dim=(1, 2))
    denom = e.sum(dim=(1, 2)) + gt.sum(dim=(1, 2))
    dice_term = (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()
    return bce_term + dice_term


def reconstruction_losses(
    probs: torch.Tensor,
    unchecked: torch.Tensor,
    gt: torch.Tensor,
    foreground_from: Literal["input_mask", "predicted"] = "input_mask",
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Consistency penalties between class probabilities and the masks.

    With TP/FP/TN/FN the four probability channels and ``S``/``S_ref`` the
    unchecked and reference masks:

    * pos = mean((TP + FN - S_ref)^2)
    * neg = mean((FP + TN - (1 - S_ref))^2)
    * seg = mean((S + FN - FP - S_ref)^2)

    ``foreground_from="predicted"`` swaps ``S`` in the seg term for the
    predicted foreground probability TP + FP.
    """
    probs = _batched(probs, 4, "reconstruction probs")
    _require_finite(probs, "reconstruction probs")
    sums = probs.sum(dim=1)
    if (sums - 1.0).abs().max() > 1e-4:
        raise ValueError("reconstruction_losses: probabilities must sum to 1 per pixel")
    s = _batched_map(unchecked, "unchecked mask").to(probs.dtype)
    s_ref = _batched_map(gt, "reference mask").to(probs.dtype)
    tp, fp, tn, fn = probs[:, 0], probs[:, 1], probs[:, 2], probs[:, 3]
    pos = ((tp + fn - s_ref) ** 2).mean()
    neg = ((fp + tn - (1.0 - s_ref)) ** 2).mean()
    if foreground_from == "predicted":
        fg = tp + fp
    elif foreground_from == "input_mask":
        fg = s
    else:
        raise ValueError(f"unknown foreground_from: {foreground_from!r}")
    seg = ((fg + fn - fp - s_ref) ** 2).mean()
    return pos, neg, seg


def total_loss(ce, edge, pos, neg, seg) -> LossBreakdown:
    """Unweighted sum of the five terms, with the parts retained."""
    for name, v in (("ce", ce), ("edge", edge), ("pos", pos), ("neg", neg), ("seg", seg)):
        if torch.is_tensor(v):
            _require_finite(v, f"total_loss {name}")
        elif not (v == v and abs(v) != float("inf")):
            raise ValueError(f"total_loss {name} is non-finite")
    return LossBreakdown(ce=ce, edge=edge, pos=pos, neg=neg, seg=seg,
                         total=ce + edge + pos + neg + seg)
