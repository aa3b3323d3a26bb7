"""Edge-guided refinement of the coarse assessment.

A side branch predicts one-pixel-wide object edges from the four encoder
stages; the deepest stage first passes through a semantic filter stack
(channel+spatial attention, decomposed asymmetric convolutions, sequential
atrous blocks). The fused edge map then gates the coarse assessment, and
an embedded-Gaussian non-local block produces the final prediction.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from pqm.backbone import FeaturePyramid, LayerNorm2d, ModelConfig, record_attention


class SpectralSpatialAttention(nn.Module):
    """Channel attention then spatial attention, both sigmoid-gated.

    Channel gate: shared MLP over global max- and average-pooled channel
    descriptors, summed and squashed. Spatial gate: 7x7 convolution
    (padding 3) over the concatenated channel-wise max/avg maps.
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.channel_mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, kernel_size=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, kernel_size=1),
        )
        self.spatial_conv = nn.Conv2d(2, 1, kernel_size=7, padding=3)

    def channel_gate(self, x: torch.Tensor) -> torch.Tensor:
        mx = F.adaptive_max_pool2d(x, 1)
        avg = F.adaptive_avg_pool2d(x, 1)
        return torch.sigmoid(self.channel_mlp(mx) + self.channel_mlp(avg))

    def spatial_gate(self, x: torch.Tensor) -> torch.Tensor:
        mx = x.max(dim=1, keepdim=True).values
        avg = x.mean(dim=1, keepdim=True)
        return torch.sigmoid(self.spatial_conv(torch.cat([mx, avg], dim=1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        spectrally = x * self.channel_gate(x)
        return spectrally * self.spatial_gate(spectrally)


class SpatialDecomposedFilter(nn.Module):
    """Sum of four sigmoid-activated asymmetric convolutions: 1x3, 3x1,
    1x5 and 5x1 with shape-preserving paddings."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv_1x3 = nn.Conv2d(channels, channels, kernel_size=(1, 3), padding=(0, 1))
        self.conv_3x1 = nn.Conv2d(channels, channels, kernel_size=(3, 1), padding=(1, 0))
        self.conv_1x5 = nn.Conv2d(channels, channels, kernel_size=(1, 5), padding=(0, 2))
        self.conv_5x1 = nn.Conv2d(channels, channels, kernel_size=(5, 1), padding=(2, 0))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (
            torch.sigmoid(self.conv_1x3(x))
            + torch.sigmoid(self.conv_3x1(x))
            + torch.sigmoid(self.conv_1x5(x))
            + torch.sigmoid(self.conv_5x1(x))
        )


class MultiFieldFilter(nn.Module):
    """Three sequential [atrous 3x3 conv, batch norm, ReLU] blocks with
    dilation rates 1, 2, 3 and shape-preserving padding."""

    def __init__(self, channels: int):
        super().__init__()
        blocks = []
        for dilation in (1, 2, 3):
            blocks += [
                nn.Conv2d(channels, channels, kernel_size=3, padding=dilation, dilation=dilation),
                nn.BatchNorm2d(channels),
                nn.ReLU(inplace=True),
            ]
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x)


class SemanticFilter(nn.Module):
    """The full filter stack applied to the deepest encoder features."""

    def __init__(self, channels: int):
        super().__init__()
        self.attention = SpectralSpatialAttention(channels)
        self.decomposed = SpatialDecomposedFilter(channels)
        self.multi_field = MultiFieldFilter(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.multi_field(self.decomposed(self.attention(x)))


class SideoutHead(nn.Module):
    """Project one encoder stage to a full-resolution single-channel map.

    The H/16 features are first brought to H/4 by parameter-free bilinear
    interpolation; two kernel-2 stride-2 transposed convolutions then emit
    the map directly at H x W, so single-pixel structures stay expressible.
    """

    def __init__(self, c_in: int, out_size: int):
        super().__init__()
        mid = max(c_in // 4, 8)
        self.up = nn.Sequential(
            nn.ConvTranspose2d(c_in, mid, kernel_size=2, stride=2),
            LayerNorm2d(mid),
            nn.GELU(),
            nn.ConvTranspose2d(mid, 1, kernel_size=2, stride=2),
        )
        self.out_size = out_size

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, size=(self.out_size // 4, self.out_size // 4),
                          mode="bilinear", align_corners=False)
        return self.up(x)


def fuse_sideouts(e_ms: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Weighted channel sum of the stacked sideouts: (B,4,H,W)x(B,4,H,W)
    -> (B,1,H,W)."""
    if e_ms.shape != weights.shape:
        raise ValueError(f"sideouts {tuple(e_ms.shape)} vs weights {tuple(weights.shape)}")
    return (e_ms * weights).sum(dim=1, keepdim=True)


class EdgeBranchResult:
    """Fused edge logits plus the per-stage sideouts and weighting map."""

    __slots__ = ("fused", "sideouts", "weights")

    def __init__(self, fused: torch.Tensor, sideouts: torch.Tensor, weights: torch.Tensor):
        self.fused = fused
        self.sideouts = sideouts
        self.weights = weights


class EdgeBranch(nn.Module):
    """Hierarchical edge prediction from the four encoder stages.

    Stages 1-3 map directly to full-resolution sideouts; stage 4 passes
    through the semantic filter first. A weighting map derived from the
    deepest sideout (three 1x1 convolutions, widths 8-8-4) blends the four
    sideouts into the fused edge logits.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = nn.ModuleList(SideoutHead(cfg.d_im, cfg.image_size) for _ in range(4))
        self.semantic_filter = SemanticFilter(cfg.d_im)
        self.weight_head = nn.Sequential(
            nn.Conv2d(1, 8, kernel_size=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(8, 8, kernel_size=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(8, 4, kernel_size=1),
        )

    def forward(self, pyr: FeaturePyramid) -> EdgeBranchResult:
        e1 = self.heads[0](pyr.f1)
        e2 = self.heads[1](pyr.f2)
        e3 = self.heads[2](pyr.f3)
        e4 = self.heads[3](self.semantic_filter(pyr.f4))
        e_ms = torch.cat([e1, e2, e3, e4], dim=1)
        weights = self.weight_head(e4)
        return EdgeBranchResult(fused=fuse_sideouts(e_ms, weights), sideouts=e_ms, weights=weights)


class NonLocalBlock(nn.Module):
    """Embedded-Gaussian non-local block with a residual connection.

    Queries are taken at full resolution; keys and values are 2x2
    max-pooled so the affinity matrix has H*W/4 columns. The softmax
    affinity is recorded for :func:`pqm.backbone.capture_attention`.
    """

    def __init__(self, channels: int, inter_channels: int | None = None):
        super().__init__()
        inter = inter_channels or max(channels // 2, 1)
        self.theta = nn.Conv2d(channels, inter, kernel_size=1)
        self.phi = nn.Conv2d(channels, inter, kernel_size=1)
        self.g = nn.Conv2d(channels, inter, kernel_size=1)
        self.out = nn.Conv2d(inter, channels, kernel_size=1)
        self.pool = nn.MaxPool2d(2)
        self.inter = inter

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        q = self.theta(x).flatten(2).transpose(1, 2)  # B, HW, inter
        pooled = self.pool(x) if min(h, w) >= 2 else x
        k = self.phi(pooled).flatten(2)  # B, inter, HW/4
        v = self.g(pooled).flatten(2).transpose(1, 2)  # B, HW/4, inter
        affinity = torch.softmax(q @ k, dim=-1)
        record_attention(affinity)
        y = (affinity @ v).transpose(1, 2).reshape(b, self.inter, h, w)
        return x + self.out(y)


class EdgeRefiner(nn.Module):
    """Final assessment: gate the coarse logits with the predicted edges,
    then apply the non-local block."""

    def __init__(self):
        super().__init__()
        self.edge_gate = nn.Conv2d(1, 1, kernel_size=3, padding=1)
        self.assess_conv = nn.Conv2d(4, 4, kernel_size=3, padding=1)
        self.non_local = NonLocalBlock(4)

    def gated_input(self, a1: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        if a1.shape[-2:] != e.shape[-2:]:
            raise ValueError(
                f"assessment {tuple(a1.shape[-2:])} and edges {tuple(e.shape[-2:])} misaligned"
            )
        return torch.sigmoid(self.edge_gate(e)) * self.assess_conv(a1)

    def forward(self, a1: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        return self.non_local(self.gated_input(a1, e))
