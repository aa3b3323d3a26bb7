"""Full network assembly plus checkpoint persistence."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Optional

import numpy as np
import torch
from torch import nn

from pqm.backbone import (
    AssessmentDecoder,
    FeaturePyramid,
    ImageEncoder,
    ModelConfig,
    PromptEncoder,
    init_parameters,
)
from pqm.egc import EdgeBranch, EdgeRefiner


@dataclass
class ModelOutput:
    """Forward-pass products: final assessment logits (B,4,H,W), the coarse
    logits before refinement, fused edge logits (B,1,H,W), plus the edge
    sideouts and their weighting map."""

    assessment: torch.Tensor
    coarse: torch.Tensor
    edge: torch.Tensor
    edge_sideouts: torch.Tensor
    edge_weights: torch.Tensor


class QualityNet(nn.Module):
    """Image + unchecked mask -> 4-class assessment logits and edge logits.

    Images are expected as (B, 3, H, W) floats in [0, 1]; the forward pass
    standardizes them with the statistics recorded in the config. Masks are
    (B, H, W) or (B, 1, H, W) binary floats.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg)
        self.prompt_encoder = PromptEncoder(cfg)
        self.decoder = AssessmentDecoder(cfg)
        self.edge_branch = EdgeBranch(cfg)
        self.refiner = EdgeRefiner()

    def encode_image(self, image: torch.Tensor) -> FeaturePyramid:
        return self.image_encoder(self.cfg.normalize(image))

    def encode_prompt(self, mask: torch.Tensor) -> torch.Tensor:
        return self.prompt_encoder(mask)

    def forward(self, image: torch.Tensor, mask: torch.Tensor) -> ModelOutput:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        pyr = self.encode_image(image)
        prompt = self.encode_prompt(mask)
        coarse = self.decoder(pyr, prompt)
        edges = self.edge_branch(pyr)
        final = self.refiner(coarse, edges.fused)
        return ModelOutput(
            assessment=final,
            coarse=coarse,
            edge=edges.fused,
            edge_sideouts=edges.sideouts,
            edge_weights=edges.weights,
        )


def build_model(cfg: ModelConfig, seed: int = 0) -> QualityNet:
    """Construct and initialize a model deterministically from one seed.

    The seed covers both the parameter initialization and the fixed Fourier
    position-encoding buffers, so two builds with equal (cfg, seed) are
    bit-identical.
    """
    torch.manual_seed(seed)
    model = QualityNet(cfg)
    init_parameters(model)
    return model


def save_checkpoint(
    path,
    model: QualityNet,
    optimizer: Optional[torch.optim.Optimizer] = None,
    step: int = 0,
    extra: Optional[dict[str, Any]] = None,
) -> None:
    """Single-archive checkpoint: config snapshot, parameters keyed by their
    hierarchical module names, optimizer state, step counter and RNG state."""
    payload = {
        "format": "pqm-checkpoint-v1",
        "config": asdict(model.cfg),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "torch_rng_state": torch.get_rng_state(),
        "numpy_rng_state": np.random.get_state(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[QualityNet, dict[str, Any]]:
    """Restore a model (and return the raw payload for optimizer/RNG state)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "pqm-checkpoint-v1":
        raise ValueError(f"{path} is not a recognized checkpoint archive")
    raw_cfg = dict(payload["config"])
    for key in ("stage_depths", "pixel_mean", "pixel_std"):
        raw_cfg[key] = tuple(raw_cfg[key])
    cfg = ModelConfig(**raw_cfg)
    model = QualityNet(cfg)
    model.load_state_dict(payload["model_state"])
    return model, payload
