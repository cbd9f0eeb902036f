"""
Grouped self-attention over ``[text | RGB | alpha]`` token sequences.

Covers the three attention-mask regimes, QKV projection with a low-rank
adapter that only ever touches alpha rows, and multi-head attention with
exact zero weight on masked key groups.
"""
import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Optional, Tuple, Union

import torch
from torch import Tensor, nn

from src.models.embeddings import (
    DomainEmbedding,
    EmbeddedTokens,
    PositionalKind,
    PositionalScheme,
    SequenceLayout,
    apply_rope,
    embed_video_tokens,
)
from src.models.numerics import DTYPE, NEG_INF, matmul, softmax_masked
from src.utils.exceptions import ConfigurationError, ShapeError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

LORA_TARGETS = ("q", "k", "v")


class MaskMode(str, Enum):
    """Attention regimes over the text, RGB and alpha groups."""

    TEXT_TO_ALPHA_BLOCKED = "text_to_alpha_blocked"
    ALL_ALPHA_KEYS_BLOCKED = "all_alpha_keys_blocked"
    UNMASKED = "unmasked"


@dataclass(frozen=True)
class MaskSpec:
    layout: SequenceLayout
    mode: MaskMode
    matrix: Tensor

    @property
    def blocked_count(self) -> int:
        return int(torch.isneginf(self.matrix).sum().item())


def build_mask(layout: SequenceLayout, mode: MaskMode) -> MaskSpec:
    """
    Additive attention mask with entries in {0, -inf}.

    TEXT_TO_ALPHA_BLOCKED blocks text queries from alpha keys;
    ALL_ALPHA_KEYS_BLOCKED blocks every text and RGB query from alpha keys;
    UNMASKED blocks nothing. Alpha queries always see the whole sequence.
    """
    mode = MaskMode(mode)
    if mode is not MaskMode.UNMASKED and not layout.doubled:
        raise ConfigurationError(f"Mask mode {mode.value} needs a doubled layout")

    matrix = torch.zeros(layout.total_len, layout.total_len, dtype=DTYPE)
    if mode is MaskMode.TEXT_TO_ALPHA_BLOCKED:
        matrix[layout.text_slice, layout.alpha_slice] = NEG_INF
    elif mode is MaskMode.ALL_ALPHA_KEYS_BLOCKED:
        query_rows = slice(0, layout.text_len + layout.video_len)
        matrix[query_rows, layout.alpha_slice] = NEG_INF
    return MaskSpec(layout=layout, mode=mode, matrix=matrix)


class LoraAdapter(nn.Module):
    """
    Low-rank residual ``gamma * x @ down @ up`` for one of the q/k/v projections.

    ``up`` starts at zero so the adapter contributes exactly nothing until trained.
    """

    def __init__(
        self,
        dim: int,
        rank: int = 128,
        gamma: float = 1.0,
        target: str = "q",
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        if target not in LORA_TARGETS:
            raise ConfigurationError(f"LoRA target must be one of {LORA_TARGETS}, got {target!r}")
        if not 1 <= rank < dim:
            raise ConfigurationError(f"LoRA rank {rank} must lie in [1, {dim})")

        self.target = target
        self.rank = rank
        self.gamma = gamma
        bound = 1.0 / math.sqrt(dim)
        down = torch.rand(dim, rank, dtype=DTYPE, generator=generator) * (2 * bound) - bound
        self.down = nn.Parameter(down)
        self.up = nn.Parameter(torch.zeros(rank, dim, dtype=DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return self.gamma * matmul(matmul(x, self.down), self.up)


class AttentionWeights(nn.Module):
    """Shared projection matrices (applied as ``x @ W``) for all token groups."""

    def __init__(self, dim: int, heads: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"Model dimension {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        std = 1.0 / math.sqrt(dim)

        def init() -> nn.Parameter:
            return nn.Parameter(torch.randn(dim, dim, dtype=DTYPE, generator=generator) * std)

        self.w_q = init()
        self.w_k = init()
        self.w_v = init()
        self.w_out = init()

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def projection(self, target: str) -> Tensor:
        return {"q": self.w_q, "k": self.w_k, "v": self.w_v}[target]


def _project_video(
    video: Tensor,
    weight: Tensor,
    adapter: Optional[LoraAdapter],
    layout: SequenceLayout,
) -> Tensor:
    projected = matmul(video, weight)
    if adapter is None or not layout.doubled:
        return projected
    rgb = projected[..., : layout.video_len, :]
    alpha = projected[..., layout.video_len :, :] + adapter(video[..., layout.video_len :, :])
    return torch.cat([rgb, alpha], dim=-2)


def _rotate_heads(rows: Tensor, positions: Tensor, heads: int, theta_base: float) -> Tensor:
    split = rows.unflatten(-1, (heads, rows.shape[-1] // heads))
    rotated = apply_rope(split, positions.unsqueeze(-1), theta_base)
    return rotated.flatten(-2)


def project_qkv(
    text_tokens: Tensor,
    video: EmbeddedTokens,
    weights: AttentionWeights,
    adapters: Optional[Mapping[str, LoraAdapter]],
    layout: SequenceLayout,
) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Project text and embedded video rows into query, key and value space.

    Text rows get the plain shared projection. Alpha rows additionally get the
    adapter residual of their target. Under RoPE the video rows of Q and K are
    rotated per head by their effective positions.

    Args:
        text_tokens: Tensor [..., L_text, D]
        video: Embedded video tokens [..., video_rows, D]
        weights: Shared attention weights
        adapters: Mapping target -> adapter covering q, k and v, or None
        layout: Sequence layout

    Returns:
        (Q, K, V), each [..., L_text + video_rows, D]
    """
    if text_tokens.shape[-2] != layout.text_len:
        raise ShapeError(f"Expected {layout.text_len} text tokens, got {text_tokens.shape[-2]}")
    if adapters is not None and layout.doubled:
        missing = set(LORA_TARGETS) - set(adapters)
        if missing:
            raise ConfigurationError(f"Adapters missing for targets {sorted(missing)}")
        for adapter in adapters.values():
            if adapter.rank >= layout.dim:
                raise ConfigurationError(f"Adapter rank {adapter.rank} >= model dimension {layout.dim}")

    outputs = []
    for target in LORA_TARGETS:
        weight = weights.projection(target)
        adapter = adapters.get(target) if adapters is not None else None
        video_rows = _project_video(video.tokens, weight, adapter, layout)
        if video.scheme.kind is PositionalKind.ROPE and target != "v":
            video_rows = _rotate_heads(video_rows, video.positions, weights.heads, video.scheme.theta_base)
        text_rows = matmul(text_tokens, weight)
        outputs.append(torch.cat([text_rows, video_rows], dim=-2))
    return outputs[0], outputs[1], outputs[2]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    return x.unflatten(-1, (heads, x.shape[-1] // heads)).transpose(-3, -2)


def attention_probabilities(q: Tensor, k: Tensor, mask: Union[MaskSpec, Tensor], heads: int) -> Tensor:
    """
    Post-softmax attention weights per head.

    Returns:
        Tensor [..., heads, T, T]
    """
    matrix = mask.matrix if isinstance(mask, MaskSpec) else mask
    if q.shape[-1] % heads:
        raise ConfigurationError(f"Dimension {q.shape[-1]} is not divisible by {heads} heads")
    if matrix.shape != (q.shape[-2], k.shape[-2]):
        raise ShapeError(f"Mask {tuple(matrix.shape)} does not match sequence length {q.shape[-2]}")

    qh, kh = _split_heads(q, heads), _split_heads(k, heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    logits = matmul(qh, kh.transpose(-2, -1)) * scale
    return softmax_masked(logits, matrix)


def grouped_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: Union[MaskSpec, Tensor],
    heads: int,
    out_proj: Optional[Tensor] = None,
    return_weights: bool = False,
):
    """
    Multi-head scaled dot-product attention with an additive {0, -inf} mask.

    Heads are concatenated in order and then passed through ``out_proj`` when given.

    Args:
        q, k, v: Tensors [..., T, D]
        mask: MaskSpec or raw [T, T] additive matrix
        heads: Number of heads dividing D
        out_proj: Optional [D, D] output projection
        return_weights: Also return the [..., heads, T, T] probabilities

    Returns:
        Tensor [..., T, D], optionally with the attention probabilities
    """
    probs = attention_probabilities(q, k, mask, heads)
    merged = matmul(probs, _split_heads(v, heads)).transpose(-3, -2).flatten(-2)
    output = matmul(merged, out_proj) if out_proj is not None else merged
    if return_weights:
        return output, probs
    return output


def truncated_equivalence_check(
    text_tokens: Tensor,
    video_tokens: Tensor,
    weights: AttentionWeights,
    adapters: Optional[Mapping[str, LoraAdapter]],
    scheme: PositionalScheme,
    domain: Optional[DomainEmbedding],
    layout: SequenceLayout,
    mode: MaskMode = MaskMode.ALL_ALPHA_KEYS_BLOCKED,
) -> float:
    """
    Compare the extended attention layer against the text+RGB base layer.

    Runs ``[text | RGB | alpha]`` under ``mode`` and ``[text | RGB]`` unmasked
    through the same weights, returning the largest absolute difference over
    the text and RGB output rows.
    """
    base_layout = layout.base()

    extended = embed_video_tokens(video_tokens, scheme, domain, layout)
    q, k, v = project_qkv(text_tokens, extended, weights, adapters, layout)
    extended_out = grouped_attention(q, k, v, build_mask(layout, mode), weights.heads, weights.w_out)

    rgb_only = embed_video_tokens(video_tokens[..., : layout.video_len, :], scheme, None, base_layout)
    q, k, v = project_qkv(text_tokens, rgb_only, weights, None, base_layout)
    base_out = grouped_attention(
        q, k, v, build_mask(base_layout, MaskMode.UNMASKED), weights.heads, weights.w_out
    )

    rows = slice(0, base_layout.total_len)
    diff = (extended_out[..., rows, :] - base_out).abs().max().item()
    logger.debug(f"Truncated equivalence under {MaskMode(mode).value}: max abs diff {diff:.3e}")
    return diff
