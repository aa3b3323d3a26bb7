"""Promptable encoder-decoder producing coarse 4-class assessment logits.

The image passes through a patchify convolution and four transformer
stages; the unchecked mask is tokenized by a small convolutional prompt
encoder and fused with the image embedding. A token-based decoder with two
way attention blocks emits an initial and a high-quality assessment map
whose sum is the coarse prediction refined downstream by the edge branch.

Every softmax attention in the package routes through
:func:`scaled_dot_product_attention`, so tests can observe all attention
weights via :func:`capture_attention` without adding state to the modules.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

_ATTN_SINK: ContextVar[Optional[list]] = ContextVar("pqm_attn_sink", default=None)


@contextmanager
def capture_attention():
    """Collect every attention weight tensor computed inside the block.

    Yields a list that accumulates detached softmax outputs of shape
    ``(..., queries, keys)``. Uses a context variable, so concurrent
    threads do not interfere.
    """
    records: list[torch.Tensor] = []
    token = _ATTN_SINK.set(records)
    try:
        yield records
    finally:
        _ATTN_SINK.reset(token)


def record_attention(weights: torch.Tensor) -> None:
    sink = _ATTN_SINK.get()
    if sink is not None:
        sink.append(weights.detach())


def scaled_dot_product_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor
) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two dimensions."""
    d_k = q.shape[-1]
    attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d_k), dim=-1)
    record_attention(attn)
    return attn @ v


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``stage_depths`` gives the number of transformer layers in each of the
    four encoder stages. ``pixel_mean``/``pixel_std`` are the per-channel
    statistics used by :meth:`normalize`; callers feed images in [0, 1].
    """

    image_size: int = 512
    d_im: int = 768
    d_pr: int = 256
    stage_depths: tuple[int, int, int, int] = (2, 5, 8, 11)
    num_heads: int = 8
    patch_size: int = 16
    pixel_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    pixel_std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if self.image_size % 16 != 0:
            raise ValueError(f"image_size must be divisible by 16, got {self.image_size}")
        if self.patch_size != 16:
            raise ValueError("patch_size is fixed at 16")
        if len(self.stage_depths) != 4 or any(d < 1 for d in self.stage_depths):
            raise ValueError(f"stage_depths must be 4 positive ints, got {self.stage_depths}")
        if self.d_pr % self.num_heads != 0:
            raise ValueError("d_pr must be divisible by num_heads")
        if self.d_im % self.num_heads != 0:
            raise ValueError("d_im must be divisible by num_heads")
        if self.d_im % 4 != 0 or self.d_pr % 4 != 0:
            raise ValueError("d_im and d_pr must be divisible by 4")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    def normalize(self, image: torch.Tensor) -> torch.Tensor:
        """Per-channel standardization of a (B, 3, H, W) image tensor."""
        mean = torch.tensor(self.pixel_mean, dtype=image.dtype, device=image.device)
        std = torch.tensor(self.pixel_std, dtype=image.dtype, device=image.device)
        return (image - mean.view(1, 3, 1, 1)) / std.view(1, 3, 1, 1)


@dataclass
class FeaturePyramid:
    """Stage outputs (B, d_im, h, w) and the compressed embedding f_im
    (B, d_pr, h, w), all on the H/16 grid."""

    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor
    f_im: torch.Tensor

    @property
    def stages(self) -> tuple[torch.Tensor, ...]:
        return (self.f1, self.f2, self.f3, self.f4)


class LayerNorm2d(nn.Module):
    """Channel-wise layer norm for (B, C, H, W) tensors."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = (x - mu).pow(2).mean(dim=1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


class FourierPositionEncoding(nn.Module):
    """Fixed random-Fourier spatial encoding.

    The projection matrix is drawn once at construction from the ambient
    torch RNG (seed it for reproducible models) and stored as a buffer, so
    checkpoints restore the exact encoding.
    """

    def __init__(self, channels: int, scale: float = 1.0):
        super().__init__()
        if channels % 2 != 0:
            raise ValueError("position encoding needs an even channel count")
        self.register_buffer("gauss", torch.randn(2, channels // 2) * scale)

    def forward(self, h: int, w: int) -> torch.Tensor:
        """Encoding grid of shape (channels, h, w) with coords in (0, 1)."""
        device = self.gauss.device
        ys = (torch.arange(h, device=device, dtype=self.gauss.dtype) + 0.5) / h
        xs = (torch.arange(w, device=device, dtype=self.gauss.dtype) + 0.5) / w
        grid = torch.stack(torch.meshgrid(ys, xs, indexing="ij"), dim=-1)  # h,w,2
        proj = (2.0 * math.pi) * (grid @ self.gauss)  # h,w,channels/2
        pe = torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)
        return pe.permute(2, 0, 1)


class MultiheadAttention(nn.Module):
    """Multi-head attention over (B, N, C) sequences with separate q/k/v."""

    def __init__(self, dim: int, num_heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError("dim must be divisible by num_heads")
        kv_dim = kv_dim or dim
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        return x.reshape(b, n, self.num_heads, c // self.num_heads).transpose(1, 2)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        out = scaled_dot_product_attention(qh, kh, vh)
        b, heads, n, d = out.shape
        out = out.transpose(1, 2).reshape(b, n, heads * d)
        return self.out_proj(out)


class MLPBlock(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.lin1 = nn.Linear(dim, hidden)
        self.lin2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.lin2(F.gelu(self.lin1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + MLP with residuals."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLPBlock(dim, int(dim * mlp_ratio))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h)
        x = x + self.mlp(self.norm2(x))
        return x


class ImageEncoder(nn.Module):
    """Patchify + four transformer stages + compression to the prompt width.

    Emits the output of every stage (all on the H/16 grid) plus ``f_im``,
    the fourth-stage features compressed by two 3x3 convolutions.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, cfg.d_im, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.pos_encoding = FourierPositionEncoding(cfg.d_im)
        self.stages = nn.ModuleList(
            nn.ModuleList(TransformerBlock(cfg.d_im, cfg.num_heads) for _ in range(depth))
            for depth in cfg.stage_depths
        )
        self.neck = nn.Sequential(
            nn.Conv2d(cfg.d_im, cfg.d_pr, kernel_size=3, padding=1, bias=False),
            LayerNorm2d(cfg.d_pr),
            nn.Conv2d(cfg.d_pr, cfg.d_pr, kernel_size=3, padding=1, bias=False),
            LayerNorm2d(cfg.d_pr),
        )

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        b, c, h, w = image.shape
        if c != 3:
            raise ValueError(f"expected 3 input channels, got {c}")
        if h % 16 != 0 or w % 16 != 0:
            raise ValueError(f"image size must be divisible by 16, got {h}x{w}")
        if (h, w) != (self.cfg.image_size, self.cfg.image_size):
            raise ValueError(
                f"image is {h}x{w} but the model was configured for "
                f"{self.cfg.image_size}x{self.cfg.image_size}"
            )
        x = self.patch_embed(image)  # B, d_im, h/16, w/16
        gh, gw = x.shape[-2:]
        x = x + self.pos_encoding(gh, gw).unsqueeze(0).to(x.dtype)
        tokens = x.flatten(2).transpose(1, 2)  # B, L, d_im
        outs = []
        for stage in self.stages:
            for block in stage:
                tokens = block(tokens)
            outs.append(tokens.transpose(1, 2).reshape(b, -1, gh, gw))
        f1, f2, f3, f4 = outs
        return FeaturePyramid(f1=f1, f2=f2, f3=f3, f4=f4, f_im=self.neck(f4))


class PromptEncoder(nn.Module):
    """Tokenize the unchecked mask into a dense prompt embedding.

    Two stride-2 blocks of [3x3 conv, channel layer norm, GELU] plus a
    final 3x3 conv produce a d_pr x H/4 x W/4 map, which is then reduced to
    the H/16 image-embedding grid by parameter-free 4x4 average pooling.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2 = cfg.d_pr // 4, cfg.d_pr // 2
        self.block1 = nn.Sequential(
            nn.Conv2d(1, c1, kernel_size=3, stride=2, padding=1), LayerNorm2d(c1), nn.GELU()
        )
        self.block2 = nn.Sequential(
            nn.Conv2d(c1, c2, kernel_size=3, stride=2, padding=1), LayerNorm2d(c2), nn.GELU()
        )
        self.out_conv = nn.Conv2d(c2, cfg.d_pr, kernel_size=3, padding=1)
        self.pool = nn.AvgPool2d(4)

    def forward(self, mask: torch.Tensor) -> torch.Tensor:
        if mask.dim() == 2:
            mask = mask.unsqueeze(0)
        if mask.dim() == 3:
            mask = mask.unsqueeze(1)
        if mask.shape[-2:] != (self.cfg.image_size, self.cfg.image_size):
            raise ValueError(
                f"mask is {tuple(mask.shape[-2:])} but the model expects "
                f"{self.cfg.image_size}x{self.cfg.image_size}"
            )
        x = self.out_conv(self.block2(self.block1(mask.float())))
        return self.pool(x)


class TwoWayAttentionBlock(nn.Module):
    """Token self-attention, token->feature and feature->token cross
    attention with an MLP on the tokens; every sub-layer is residual and
    layer-normalized."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.self_attn = MultiheadAttention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_token_to_feat = MultiheadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLPBlock(dim, int(dim * mlp_ratio))
        self.norm3 = nn.LayerNorm(dim)
        self.cross_feat_to_token = MultiheadAttention(dim, num_heads)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens: torch.Tensor, feats: torch.Tensor):
        tokens = self.norm1(tokens + self.self_attn(tokens, tokens, tokens))
        tokens = self.norm2(tokens + self.cross_token_to_feat(tokens, feats, feats))
        tokens = self.norm3(tokens + self.mlp(tokens))
        feats = self.norm4(feats + self.cross_feat_to_token(feats, tokens, tokens))
        return tokens, feats


class TokenMLP(nn.Module):
    """Three-layer head projecting output tokens before the feature dot."""

    def __init__(self, dim: int):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim)
        )

    def forward(self, x):
        return self.layers(x)


def _upsample_stack(c_in: int, c_out: int) -> nn.Sequential:
    """Two kernel-2 stride-2 transposed convolutions (x4 upsampling)."""
    mid = max(c_out, c_in // 4)
    return nn.Sequential(
        nn.ConvTranspose2d(c_in, mid, kernel_size=2, stride=2),
        LayerNorm2d(mid),
        nn.GELU(),
        nn.ConvTranspose2d(mid, c_out, kernel_size=2, stride=2),
    )


class AssessmentDecoder(nn.Module):
    """Fuse image and prompt embeddings into 4-channel assessment logits.

    Two learned token sets (standard and high-quality, 4 rows each) attend
    to the fused features through two two-way blocks and a final
    token-to-feature cross-attention. Each token set is dotted with an
    upsampled feature map to give an initial and a high-quality map at
    quarter resolution; both are bilinearly upsampled to full resolution
    and summed. Channel order of the output is TP, FP, TN, FN.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_pr
        self.output_tokens = nn.Parameter(torch.zeros(4, d))
        self.hq_tokens = nn.Parameter(torch.zeros(4, d))
        self.token_pos = nn.Parameter(torch.zeros(8, d))
        self.dense_pos = FourierPositionEncoding(d)
        self.blocks = nn.ModuleList(TwoWayAttentionBlock(d, cfg.num_heads) for _ in range(2))
        self.final_cross = MultiheadAttention(d, cfg.num_heads)
        self.final_norm = nn.LayerNorm(d)
        self.up_features = _upsample_stack(d, d)
        self.up_f1 = _upsample_stack(cfg.d_im, d)
        self.up_fim = _upsample_stack(d, d)
        self.hq_fuse = nn.Sequential(
            nn.Conv2d(d, d, kernel_size=3, padding=1),
            nn.GELU(),
            nn.Conv2d(d, d, kernel_size=3, padding=1),
        )
        self.mlp_standard = TokenMLP(d)
        self.mlp_hq = TokenMLP(d)

    def build_tokens(self, batch: int) -> torch.Tensor:
        """Concatenated [standard; hq] tokens with positional embedding.

        Row order is stable: rows 0-3 are the standard tokens, 4-7 the
        high-quality tokens.
        """
        o_f = torch.cat([self.output_tokens, self.hq_tokens], dim=0) + self.token_pos
        return o_f.unsqueeze(0).expand(batch, -1, -1)

    def forward(self, pyr: FeaturePyramid, prompt: torch.Tensor) -> torch.Tensor:
        if prompt.shape[-2:] != pyr.f_im.shape[-2:]:
            raise ValueError(
                f"prompt grid {tuple(prompt.shape[-2:])} does not match image "
                f"embedding grid {tuple(pyr.f_im.shape[-2:])}"
            )
        b, d, gh, gw = pyr.f_im.shape
        fused = pyr.f_im + prompt
        fused = fused + self.dense_pos(gh, gw).unsqueeze(0).to(fused.dtype)
        feats = fused.flatten(2).transpose(1, 2)  # B, L, d
        tokens = self.build_tokens(b)
        for block in self.blocks:
            tokens, feats = block(tokens, feats)
        tokens = self.final_norm(tokens + self.final_cross(tokens, feats, feats))
        standard, hq = tokens[:, :4], tokens[:, 4:]

        f_prime = feats.transpose(1, 2).reshape(b, d, gh, gw)
        f_up = self.up_features(f_prime)  # B, d, H/4, W/4
        a_init = torch.einsum("bkc,bchw->bkhw", self.mlp_standard(standard), f_up)

        f_hq = self.up_f1(pyr.f1) + self.up_fim(pyr.f_im)
        f_hq = self.hq_fuse(f_hq + f_up)
        a_hq = torch.einsum("bkc,bchw->bkhw", self.mlp_hq(hq), f_hq)

        size = (self.cfg.image_size, self.cfg.image_size)
        a_init = F.interpolate(a_init, size=size, mode="bilinear", align_corners=False)
        a_hq = F.interpolate(a_hq, size=size, mode="bilinear", align_corners=False)
        return a_init + a_hq


def init_parameters(module: nn.Module) -> None:
    """Truncated-normal (std 0.02) projections, zero biases, unit norms."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.LayerNorm, LayerNorm2d, nn.BatchNorm2d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    for name, p in module.named_parameters(recurse=True):
        if name.endswith(("output_tokens", "hq_tokens", "token_pos")):
            nn.init.trunc_normal_(p, std=0.02)
