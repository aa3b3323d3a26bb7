import pytest
import torch

from pqm.backbone import ModelConfig


@pytest.fixture
def toy_cfg() -> ModelConfig:
    """Small square config used across the network tests."""
    return ModelConfig(
        image_size=64,
        d_im=32,
        d_pr=16,
        stage_depths=(1, 1, 1, 1),
        num_heads=4,
        pixel_mean=(0.5, 0.5, 0.5),
        pixel_std=(0.5, 0.5, 0.5),
    )


@pytest.fixture(autouse=True)
def _single_thread_determinism():
    # keep CPU kernels deterministic regardless of the host's thread count
    n = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(n)
