"""
Shared fixtures: a tiny model geometry that keeps every test fast.
"""
import pytest
import torch

from src.models.dit import DiTConfig, VideoDiT
from src.models.numerics import DTYPE, seed_everything


@pytest.fixture
def tiny_config() -> DiTConfig:
    """Depth-2, D=32 model over 2 frames of 8x8 pixels (32 video tokens per half)."""
    return DiTConfig(
        depth=2,
        dim=32,
        heads=2,
        ffn_mult=2,
        patch=2,
        frames=2,
        height=8,
        width=8,
        cond_tokens=2,
        time_embed_dim=16,
        lora_rank=4,
    )


@pytest.fixture
def tiny_model(tiny_config) -> VideoDiT:
    return VideoDiT(tiny_config)


@pytest.fixture
def generator() -> torch.Generator:
    return seed_everything(1234)


@pytest.fixture
def doubled_tokens(tiny_config, generator):
    """Random noisy RGBA tokens [2, 2L, patch_dim]."""
    return torch.randn(2, 2 * tiny_config.video_len, tiny_config.patch_dim, dtype=DTYPE, generator=generator)


@pytest.fixture
def randomize_finetune_params():
    """Give adapters and the domain embedding nonzero values."""

    def apply(model: VideoDiT, seed: int = 5, scale: float = 0.1) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, param in model.named_parameters():
                if "adapters." in name or "domain_embedding" in name:
                    param.copy_(torch.randn(param.shape, dtype=DTYPE, generator=gen) * scale)

    return apply
