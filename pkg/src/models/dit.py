"""
Desk-scale video diffusion transformer with joint RGB/alpha generation.

The base network denoises text-conditioned RGB token sequences. Fine-tuning
attaches one of three joint designs:

- SEQUENCE_EXTENSION: the video sequence is doubled, alpha tokens share the
  RGB positions, carry a learnable domain embedding, and their q/k/v
  projections receive low-rank adapters.
- BATCH_EXTENSION: RGB and alpha run as two streams of the base network that
  exchange information through a shared cross-attention after every
  attention layer.
- LATENT_DIM_EXTENSION: RGB and alpha patches are concatenated channel-wise
  and linearly merged into one token sequence, then split back after the
  final block.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterator, List, Mapping, Optional, Tuple

import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from torch import Tensor, nn

from src.models.attention import (
    LORA_TARGETS,
    AttentionWeights,
    LoraAdapter,
    MaskMode,
    MaskSpec,
    build_mask,
    grouped_attention,
    project_qkv,
)
from src.models.embeddings import (
    DomainEmbedding,
    EmbeddedTokens,
    PositionalKind,
    PositionalScheme,
    SequenceLayout,
    embed_video_tokens,
    sinusoidal_table,
)
from src.models.numerics import DTYPE, ensure_finite, freeze, layer_norm
from src.utils.exceptions import ConfigurationError, ContractError, ShapeError, UnknownConditionError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

# Parameter-name fragments that identify fine-tune additions.
FINETUNE_MARKERS = ("adapters.", "domain_embedding", "communication.", "latent_")


class JointDesign(str, Enum):
    SEQUENCE_EXTENSION = "sequence_extension"
    BATCH_EXTENSION = "batch_extension"
    LATENT_DIM_EXTENSION = "latent_dim_extension"


class DiTConfig(BaseModel):
    """
    Architecture of the toy video DiT.

    Direct construction raises pydantic's ``ValidationError`` for bad fields or
    geometry. ``from_mapping`` raises ``ConfigurationError`` instead.
    """

    model_config = ConfigDict(extra="forbid")

    depth: int = Field(4, ge=0)
    dim: int = Field(64, ge=2)
    heads: int = Field(4, ge=1)
    ffn_mult: int = Field(4, ge=1)
    patch: int = Field(4, ge=1)
    frames: int = Field(8, ge=1)
    height: int = Field(16, ge=1)
    width: int = Field(16, ge=1)
    cond_tokens: int = Field(4, ge=0)
    time_embed_dim: int = Field(64, ge=2)
    num_conditions: int = Field(16, ge=1)
    lora_rank: int = Field(128, ge=1)
    lora_gamma: float = 1.0
    positional: PositionalKind = PositionalKind.ROPE
    theta_base: float = Field(10000.0, gt=0)
    init_seed: int = 0

    @model_validator(mode="after")
    def _check_geometry(self) -> "DiTConfig":
        if self.dim % self.heads:
            raise ConfigurationError(f"dim={self.dim} is not divisible by heads={self.heads}")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigurationError(
                f"Frame {self.height}x{self.width} is not divisible by patch={self.patch}"
            )
        if self.dim % 2 or self.time_embed_dim % 2:
            raise ConfigurationError("dim and time_embed_dim must be even")
        if self.positional is PositionalKind.ROPE and self.head_dim % 2:
            raise ConfigurationError(f"RoPE needs an even head dimension, got {self.head_dim}")
        return self

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "DiTConfig":
        """Validate a plain mapping, reporting failures as ``ConfigurationError``."""
        try:
            return cls.model_validate(dict(data))
        except ValidationError as e:
            raise ConfigurationError(f"Invalid model config: {e}") from e

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def grid_h(self) -> int:
        return self.height // self.patch

    @property
    def grid_w(self) -> int:
        return self.width // self.patch

    @property
    def video_len(self) -> int:
        return self.frames * self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def resolved_lora_rank(self) -> int:
        if self.lora_rank < self.dim:
            return self.lora_rank
        clamped = max(1, self.dim // 2)
        logger.warning(f"LoRA rank {self.lora_rank} >= dim {self.dim}; clamping to {clamped}")
        return clamped

    def layout(self, doubled: bool = True) -> SequenceLayout:
        return SequenceLayout(self.cond_tokens, self.video_len, self.dim, doubled=doubled)

    def scheme(self) -> PositionalScheme:
        return PositionalScheme(self.positional, self.dim, self.theta_base)

    def sequence_extension_trainable_count(self) -> int:
        """Adapters on q, k and v per block plus the domain embedding."""
        rank = self.resolved_lora_rank
        return self.depth * 3 * (self.dim * rank + rank * self.dim) + self.dim


@dataclass
class ForwardRecord:
    """Prediction plus per-layer hidden states and attention probabilities."""

    prediction: Tensor
    hidden: List[Tensor] = field(default_factory=list)
    attention: List[Tensor] = field(default_factory=list)


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.shift = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.scale, self.shift)


class ConditionTable(nn.Module):
    """Learned stand-in for text-encoder tokens: one ``L_text × D`` block per condition id."""

    def __init__(self, num_conditions: int, cond_tokens: int, dim: int):
        super().__init__()
        self.num_conditions = num_conditions
        self.cond_tokens = cond_tokens
        self.dim = dim
        self.table = nn.Embedding(num_conditions, max(cond_tokens, 1) * dim, dtype=DTYPE)

    def forward(self, cond_ids: Tensor) -> Tensor:
        cond_ids = torch.as_tensor(cond_ids, dtype=torch.int64).reshape(-1)
        if ((cond_ids < 0) | (cond_ids >= self.num_conditions)).any():
            raise UnknownConditionError(
                f"Condition ids {cond_ids.tolist()} outside [0, {self.num_conditions})"
            )
        if self.cond_tokens == 0:
            return torch.zeros(cond_ids.shape[0], 0, self.dim, dtype=DTYPE)
        return self.table(cond_ids).view(-1, self.cond_tokens, self.dim)


class CrossStreamCommunication(nn.Module):
    """
    Shared cross-attention letting each stream's video tokens read the other's.

    The output projection starts at zero, so an untrained module leaves both
    streams untouched. Using one set of weights for both directions makes the
    exchange symmetric under swapping the streams.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = LayerNorm(dim)
        self.weights = AttentionWeights(dim, heads)
        with torch.no_grad():
            self.weights.w_out.zero_()

    def _read(self, queries: Tensor, keys: Tensor) -> Tensor:
        q = self.norm(queries) @ self.weights.w_q
        source = self.norm(keys)
        k, v = source @ self.weights.w_k, source @ self.weights.w_v
        mask = torch.zeros(q.shape[-2], k.shape[-2], dtype=DTYPE)
        return grouped_attention(q, k, v, mask, self.heads, self.weights.w_out)

    def forward(self, first: Tensor, second: Tensor) -> Tuple[Tensor, Tensor]:
        if first.shape != second.shape:
            raise ConfigurationError(
                f"Stream shapes differ: {tuple(first.shape)} vs {tuple(second.shape)}"
            )
        return first + self._read(first, second), second + self._read(second, first)


class DiTBlock(nn.Module):
    """norm → masked grouped attention → residual → norm → FFN → residual."""

    def __init__(self, dim: int, heads: int, ffn_mult: int):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = AttentionWeights(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_mult * dim, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(ffn_mult * dim, dim, dtype=DTYPE),
        )
        self.adapters: Optional[nn.ModuleDict] = None
        self.communication: Optional[CrossStreamCommunication] = None

    def attend(
        self,
        h: Tensor,
        layout: SequenceLayout,
        mask: MaskSpec,
        scheme: PositionalScheme,
        positions: Tensor,
        record: bool = False,
    ) -> Tuple[Tensor, Optional[Tensor]]:
        normed = self.norm1(h)
        text = normed[..., layout.text_slice, :]
        video = EmbeddedTokens(normed[..., layout.video_slice, :], positions, scheme)
        adapters = dict(self.adapters) if self.adapters is not None and layout.doubled else None
        q, k, v = project_qkv(text, video, self.attn, adapters, layout)
        result = grouped_attention(q, k, v, mask, self.attn.heads, self.attn.w_out, return_weights=record)
        if record:
            out, probs = result
            return h + out, probs
        return h + result, None

    def feed_forward(self, h: Tensor) -> Tensor:
        return h + self.ffn(self.norm2(h))

    def forward(self, h, layout, mask, scheme, positions, record=False):
        h, probs = self.attend(h, layout, mask, scheme, positions, record)
        return self.feed_forward(h), probs


class VideoDiT(nn.Module):
    """Patch-space video DiT with pluggable joint RGB/alpha designs."""

    def __init__(self, config: DiTConfig):
        super().__init__()
        self.config = config
        dim, patch_dim = config.dim, config.patch_dim

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.init_seed)
            self.patch_embed = nn.Linear(patch_dim, dim, dtype=DTYPE)
            self.time_proj = nn.Linear(config.time_embed_dim, dim, dtype=DTYPE)
            self.conditions = ConditionTable(config.num_conditions, config.cond_tokens, dim)
            self.blocks = nn.ModuleList(
                [DiTBlock(dim, config.heads, config.ffn_mult) for _ in range(config.depth)]
            )
            self.final_norm = LayerNorm(dim)
            self.unpatch = nn.Linear(dim, patch_dim, dtype=DTYPE)

        self.domain_embedding: Optional[DomainEmbedding] = None
        self.latent_merge: Optional[nn.Linear] = None
        self.latent_unmerge: Optional[nn.Linear] = None
        self.design: Optional[JointDesign] = None

        logger.info(
            f"VideoDiT: depth={config.depth} dim={dim} heads={config.heads} "
            f"L={config.video_len} patch_dim={patch_dim} params={self.parameter_count()}"
        )

    # ------------------------------------------------------------------
    # Parameter sets
    # ------------------------------------------------------------------
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def trainable_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def base_parameters(self) -> Iterator[Tuple[str, nn.Parameter]]:
        """Named parameters of the pretrained network, excluding fine-tune additions."""
        for name, param in self.named_parameters():
            if not any(marker in name for marker in FINETUNE_MARKERS):
                yield name, param

    def trainable_names(self) -> List[str]:
        return [name for name, p in self.named_parameters() if p.requires_grad]

    def attach_design(self, design: JointDesign) -> None:
        """Add the (untrained) modules a joint design needs; a no-op if already attached."""
        design = JointDesign(design)
        if self.design is not None and self.design is not design:
            raise ConfigurationError(f"Model already carries design {self.design.value}")
        if self.design is design:
            return

        config = self.config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.init_seed + 1)
            if design is JointDesign.SEQUENCE_EXTENSION:
                rank = config.resolved_lora_rank
                self.domain_embedding = DomainEmbedding(config.dim)
                for block in self.blocks:
                    block.adapters = nn.ModuleDict(
                        {
                            target: LoraAdapter(config.dim, rank, config.lora_gamma, target)
                            for target in LORA_TARGETS
                        }
                    )
            elif design is JointDesign.BATCH_EXTENSION:
                for block in self.blocks:
                    block.communication = CrossStreamCommunication(config.dim, config.heads)
            else:
                self.latent_merge = nn.Linear(2 * config.patch_dim, config.dim, dtype=DTYPE)
                self.latent_unmerge = nn.Linear(config.dim, 2 * config.patch_dim, dtype=DTYPE)
                with torch.no_grad():
                    self.latent_merge.weight.copy_(torch.eye(config.dim, 2 * config.patch_dim, dtype=DTYPE))
                    self.latent_unmerge.weight.copy_(torch.eye(2 * config.patch_dim, config.dim, dtype=DTYPE))
                    self.latent_merge.bias.zero_()
                    self.latent_unmerge.bias.zero_()
                if 2 * config.patch_dim > config.dim:
                    logger.warning(
                        f"Latent merge maps {2 * config.patch_dim} channels into dim {config.dim}; "
                        "identity initialisation is lossy"
                    )
        self.design = design

    def prepare_finetune(self, design: JointDesign) -> List[nn.Parameter]:
        """
        Freeze the base network and attach the trainable set of ``design``.

        Returns:
            The trainable parameters, in registration order
        """
        freeze(self)
        self.attach_design(design)
        for name, param in self.named_parameters():
            if any(marker in name for marker in FINETUNE_MARKERS):
                param.requires_grad_(True)
        trainable = [p for p in self.parameters() if p.requires_grad]
        logger.info(
            f"Fine-tune regime {JointDesign(design).value}: "
            f"{sum(p.numel() for p in trainable)} trainable parameters"
        )
        return trainable

    # ------------------------------------------------------------------
    # Forward passes
    # ------------------------------------------------------------------
    def _time_embedding(self, t: Tensor, batch: int) -> Tensor:
        t = torch.as_tensor(t, dtype=DTYPE).reshape(-1)
        ensure_finite(t, "diffusion time")
        if t.numel() == 1:
            t = t.expand(batch)
        if t.numel() != batch:
            raise ContractError(f"Expected {batch} diffusion times, got {t.numel()}")
        return self.time_proj(sinusoidal_table(t * 1000.0, self.config.time_embed_dim))

    def _context(self, t: Tensor, cond_ids: Tensor, batch: int) -> Tuple[Tensor, Tensor]:
        time = self._time_embedding(t, batch).unsqueeze(-2)
        text = self.conditions(cond_ids)
        if text.shape[0] == 1 and batch > 1:
            text = text.expand(batch, -1, -1)
        if text.shape[0] != batch:
            raise ContractError(f"Expected {batch} condition ids, got {text.shape[0]}")
        return text + time, time

    def _check_tokens(self, tokens: Tensor, width: int) -> None:
        if tokens.dim() != 3 or tokens.shape[-1] != width:
            raise ConfigurationError(
                f"Expected tokens [B x rows x {width}], got {tuple(tokens.shape)}"
            )

    def _run_blocks(
        self,
        text: Tensor,
        video: Tensor,
        layout: SequenceLayout,
        mode: MaskMode,
        record: Optional[ForwardRecord],
    ) -> Tensor:
        scheme = self.config.scheme()
        domain = self.domain_embedding if layout.doubled else None
        embedded = embed_video_tokens(video, scheme, domain, layout)
        mask = build_mask(layout, mode)

        h = torch.cat([text, embedded.tokens], dim=-2)
        for block in self.blocks:
            h, probs = block(h, layout, mask, scheme, embedded.positions, record is not None)
            if record is not None:
                record.hidden.append(h)
                record.attention.append(probs)
        return self.final_norm(h[..., layout.video_slice, :])

    def forward(
        self,
        tokens: Tensor,
        t,
        cond_ids,
        mode: MaskMode = MaskMode.TEXT_TO_ALPHA_BLOCKED,
        design: JointDesign = JointDesign.SEQUENCE_EXTENSION,
        record: bool = False,
    ):
        """
        Predict the objective target for noisy patch tokens.

        Args:
            tokens: [B, L, patch_dim] (RGB only, base network) or [B, 2L, patch_dim]
                (RGB half then alpha half)
            t: Diffusion time in [0, 1], scalar or [B]
            cond_ids: Condition ids [B]
            mode: Attention mask regime (sequence extension only)
            design: Joint design used for doubled inputs
            record: Return a ForwardRecord with per-layer states

        Returns:
            Prediction tokens shaped like ``tokens``, or a ForwardRecord
        """
        config = self.config
        self._check_tokens(tokens, config.patch_dim)
        rows = tokens.shape[-2]
        if rows not in (config.video_len, 2 * config.video_len):
            raise ConfigurationError(
                f"Token rows {rows} match neither L={config.video_len} nor 2L={2 * config.video_len}"
            )

        design = JointDesign(design)
        trace = ForwardRecord(prediction=tokens.new_empty(0)) if record else None
        if rows == 2 * config.video_len and design is JointDesign.BATCH_EXTENSION:
            rgb, alpha = self.batch_extension_forward(
                tokens[:, : config.video_len], tokens[:, config.video_len :], t, cond_ids
            )
            prediction = torch.cat([rgb, alpha], dim=-2)
        elif rows == 2 * config.video_len and design is JointDesign.LATENT_DIM_EXTENSION:
            rgb, alpha = self.latent_dim_forward(
                tokens[:, : config.video_len], tokens[:, config.video_len :], t, cond_ids, trace
            )
            prediction = torch.cat([rgb, alpha], dim=-2)
        else:
            layout = config.layout(doubled=rows == 2 * config.video_len)
            text, time = self._context(t, cond_ids, tokens.shape[0])
            video = self.patch_embed(tokens) + time
            prediction = self.unpatch(self._run_blocks(text, video, layout, MaskMode(mode), trace))

        if trace is not None:
            trace.prediction = prediction
            return trace
        return prediction

    def batch_extension_forward(
        self,
        rgb_tokens: Tensor,
        alpha_tokens: Tensor,
        t,
        cond_ids,
    ) -> Tuple[Tensor, Tensor]:
        """
        Run RGB and alpha as two base-network streams that talk after every attention layer.

        Returns:
            (rgb prediction, alpha prediction), each [B, L, patch_dim]
        """
        config = self.config
        self._check_tokens(rgb_tokens, config.patch_dim)
        self._check_tokens(alpha_tokens, config.patch_dim)
        if rgb_tokens.shape != alpha_tokens.shape or rgb_tokens.shape[-2] != config.video_len:
            raise ConfigurationError(
                f"Stream shapes {tuple(rgb_tokens.shape)} and {tuple(alpha_tokens.shape)} "
                f"must both be [B x {config.video_len} x {config.patch_dim}]"
            )

        layout = config.layout(doubled=False)
        scheme = config.scheme()
        mask = build_mask(layout, MaskMode.UNMASKED)
        text, time = self._context(t, cond_ids, rgb_tokens.shape[0])

        streams = []
        for stream_tokens in (rgb_tokens, alpha_tokens):
            embedded = embed_video_tokens(self.patch_embed(stream_tokens) + time, scheme, None, layout)
            streams.append(torch.cat([text, embedded.tokens], dim=-2))
        positions = embedded.positions

        first, second = streams
        for block in self.blocks:
            first, _ = block.attend(first, layout, mask, scheme, positions)
            second, _ = block.attend(second, layout, mask, scheme, positions)
            if block.communication is not None:
                video = layout.video_slice
                a, b = block.communication(first[..., video, :], second[..., video, :])
                first = torch.cat([first[..., layout.text_slice, :], a], dim=-2)
                second = torch.cat([second[..., layout.text_slice, :], b], dim=-2)
            first = block.feed_forward(first)
            second = block.feed_forward(second)

        rgb = self.unpatch(self.final_norm(first[..., layout.video_slice, :]))
        alpha = self.unpatch(self.final_norm(second[..., layout.video_slice, :]))
        return rgb, alpha

    def latent_dim_forward(
        self,
        rgb_tokens: Tensor,
        alpha_tokens: Tensor,
        t,
        cond_ids,
        record: Optional[ForwardRecord] = None,
    ) -> Tuple[Tensor, Tensor]:
        """
        Merge RGB and alpha channel-wise into one L-length sequence and split after the blocks.

        Returns:
            (rgb prediction, alpha prediction), each [B, L, patch_dim]
        """
        if self.latent_merge is None or self.latent_unmerge is None:
            raise ConfigurationError("Latent-dimension design is not attached to this model")
        config = self.config
        self._check_tokens(rgb_tokens, config.patch_dim)
        self._check_tokens(alpha_tokens, config.patch_dim)
        if rgb_tokens.shape != alpha_tokens.shape:
            raise ShapeError(f"RGB {tuple(rgb_tokens.shape)} and alpha {tuple(alpha_tokens.shape)} differ")

        layout = config.layout(doubled=False)
        text, time = self._context(t, cond_ids, rgb_tokens.shape[0])
        merged = self.latent_merge(torch.cat([rgb_tokens, alpha_tokens], dim=-1)) + time
        hidden = self._run_blocks(text, merged, layout, MaskMode.UNMASKED, record)
        split = self.latent_unmerge(hidden)
        return split[..., : config.patch_dim], split[..., config.patch_dim :]

    def symmetry_gaps(self, half_tokens: Tensor, t, cond_ids, mode: MaskMode = MaskMode.TEXT_TO_ALPHA_BLOCKED) -> List[float]:
        """
        Per-layer max |RGB - alpha| hidden-state difference for duplicated halves.

        Returns:
            One value per block followed by the value for the final prediction
        """
        config = self.config
        doubled = torch.cat([half_tokens, half_tokens], dim=-2)
        trace = self.forward(doubled, t, cond_ids, mode=mode, record=True)
        layout = config.layout(doubled=True)
        gaps = [
            (h[..., layout.rgb_slice, :] - h[..., layout.alpha_slice, :]).abs().max().item()
            for h in trace.hidden
        ]
        prediction = trace.prediction
        gaps.append(
            (prediction[:, : config.video_len] - prediction[:, config.video_len :]).abs().max().item()
        )
        return gaps


def design_trainable_counts(config: DiTConfig) -> Dict[str, int]:
    """Closed-form trainable-parameter counts of every joint design."""
    dim, patch_dim = config.dim, config.patch_dim
    communication = 4 * dim * dim + 2 * dim
    return {
        JointDesign.SEQUENCE_EXTENSION.value: config.sequence_extension_trainable_count(),
        JointDesign.BATCH_EXTENSION.value: config.depth * communication,
        JointDesign.LATENT_DIM_EXTENSION.value: 2 * (2 * patch_dim * dim) + dim + 2 * patch_dim,
    }
