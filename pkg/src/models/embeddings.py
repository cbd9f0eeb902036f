"""Positional encodings, shared alpha position indices and the domain embedding."""
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import torch
from torch import Tensor, nn

from src.models.numerics import DTYPE
from src.utils.exceptions import ConfigurationError, PositionIndexError, ShapeError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)


class PositionalKind(str, Enum):
    ABSOLUTE_SINUSOIDAL = "absolute_sinusoidal"
    ROPE = "rope"


@dataclass(frozen=True)
class PositionalScheme:
    """Which positional encoding the video tokens carry."""

    kind: PositionalKind
    dim: int
    theta_base: float = 10000.0

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2:
            raise ConfigurationError(f"Positional encodings need an even dimension, got {self.dim}")
        if self.theta_base <= 0:
            raise ConfigurationError(f"theta_base must be positive, got {self.theta_base}")


@dataclass(frozen=True)
class SequenceLayout:
    """
    Segment layout of the concatenated ``[text | RGB | alpha]`` token sequence.

    Rows ``[0, text_len)`` are text, the next ``video_len`` rows are RGB and,
    when ``doubled``, the final ``video_len`` rows are alpha.
    """

    text_len: int
    video_len: int
    dim: int
    doubled: bool = True

    def __post_init__(self):
        if self.text_len < 0 or self.video_len < 1 or self.dim < 1:
            raise ConfigurationError(
                f"Invalid layout: text_len={self.text_len}, video_len={self.video_len}, dim={self.dim}"
            )

    @property
    def video_rows(self) -> int:
        return 2 * self.video_len if self.doubled else self.video_len

    @property
    def total_len(self) -> int:
        return self.text_len + self.video_rows

    @property
    def text_slice(self) -> slice:
        return slice(0, self.text_len)

    @property
    def rgb_slice(self) -> slice:
        return slice(self.text_len, self.text_len + self.video_len)

    @property
    def alpha_slice(self) -> slice:
        if not self.doubled:
            raise ConfigurationError("Layout has no alpha segment")
        return slice(self.text_len + self.video_len, self.total_len)

    @property
    def video_slice(self) -> slice:
        return slice(self.text_len, self.total_len)

    def base(self) -> "SequenceLayout":
        """The undoubled (text + RGB) layout sharing this geometry."""
        return SequenceLayout(self.text_len, self.video_len, self.dim, doubled=False)


@dataclass
class EmbeddedTokens:
    """Video tokens after embedding, with the effective position of every row."""

    tokens: Tensor
    positions: Tensor
    scheme: PositionalScheme


class DomainEmbedding(nn.Module):
    """Learnable 1×D vector that marks alpha tokens, zero at construction."""

    def __init__(self, dim: int):
        super().__init__()
        self.vector = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def expand(self, rows: int) -> Tensor:
        """Broadcast to ``rows × D`` by repetition."""
        return self.vector.unsqueeze(0).expand(rows, -1)


def position_index(m: int, video_len: int) -> int:
    """
    Effective 1-based position of video token ``m``.

    Alpha tokens (``m > L``) reuse the index of the RGB token they mirror.
    """
    if not 1 <= m <= 2 * video_len:
        raise PositionIndexError(f"Token position {m} outside [1, {2 * video_len}]")
    return m if m <= video_len else m - video_len


def video_positions(layout: SequenceLayout) -> Tensor:
    """Effective positions of every video row of ``layout`` as an int64 tensor."""
    rgb = torch.arange(1, layout.video_len + 1, dtype=torch.int64)
    return torch.cat([rgb, rgb]) if layout.doubled else rgb


def _sinusoid_angles(index: Tensor, dim: int) -> Tensor:
    if dim % 2:
        raise ConfigurationError(f"Sinusoidal encodings need an even dimension, got {dim}")
    exponent = torch.arange(0, dim, 2, dtype=DTYPE) / dim
    return index.to(DTYPE).unsqueeze(-1) / torch.pow(torch.tensor(10000.0, dtype=DTYPE), exponent)


def sinusoidal_table(index: Tensor, dim: int) -> Tensor:
    """
    Interleaved sin/cos encodings for a tensor of (possibly fractional) indices.

    Returns:
        Tensor [..., dim] with channel 2i = sin(index / 10000^(2i/dim)) and
        channel 2i+1 the matching cosine
    """
    angles = _sinusoid_angles(index, dim)
    return torch.stack((torch.sin(angles), torch.cos(angles)), dim=-1).flatten(-2)


def sinusoidal_pe(index: int, dim: int) -> Tensor:
    """Absolute sinusoidal encoding of a single non-negative index."""
    if index < 0:
        raise PositionIndexError(f"Position index must be non-negative, got {index}")
    return sinusoidal_table(torch.tensor(index, dtype=DTYPE), dim)


def apply_rope(
    x: Tensor,
    index: Union[int, Tensor],
    theta_base: float = 10000.0,
) -> Tensor:
    """
    Rotate channel pairs (2i, 2i+1) by ``index * theta_base^(-2i/d)``.

    Args:
        x: Tensor [..., d] (a single vector or rows aligned with ``index``)
        index: Scalar position or tensor of positions broadcastable to ``x[..., 0]``
        theta_base: Frequency base

    Returns:
        Rotated tensor, same shape as ``x``
    """
    dim = x.shape[-1]
    if dim % 2:
        raise ConfigurationError(f"RoPE needs an even dimension, got {dim}")

    index = torch.as_tensor(index, dtype=DTYPE)
    inv_freq = torch.pow(
        torch.tensor(theta_base, dtype=DTYPE),
        -torch.arange(0, dim, 2, dtype=DTYPE) / dim,
    )
    angles = index.unsqueeze(-1) * inv_freq
    cos, sin = torch.cos(angles), torch.sin(angles)

    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    rotated_even = x_even * cos - x_odd * sin
    rotated_odd = x_even * sin + x_odd * cos
    return torch.stack((rotated_even, rotated_odd), dim=-1).flatten(-2)


def embed_video_tokens(
    x: Tensor,
    scheme: PositionalScheme,
    domain: Optional[DomainEmbedding],
    layout: SequenceLayout,
) -> EmbeddedTokens:
    """
    Add shared positional terms and the alpha-only domain embedding.

    ABSOLUTE_SINUSOIDAL adds ``p[position_index(m)]`` to every video row;
    ROPE leaves positions for the q/k rotation inside the projection. Under
    both schemes alpha rows additionally receive ``d``.

    Args:
        x: Video tokens [..., video_rows, D]
        scheme: Positional scheme
        domain: Domain embedding (ignored for an undoubled layout)
        layout: Sequence layout

    Returns:
        EmbeddedTokens holding the embedded rows and their effective positions
    """
    if scheme.dim != layout.dim:
        raise ConfigurationError(f"Scheme dimension {scheme.dim} != layout dimension {layout.dim}")
    if x.shape[-1] != layout.dim or x.shape[-2] != layout.video_rows:
        raise ShapeError(
            f"Video tokens of shape {tuple(x.shape)} do not match layout "
            f"({layout.video_rows} x {layout.dim})"
        )

    positions = video_positions(layout)
    if scheme.kind is PositionalKind.ABSOLUTE_SINUSOIDAL:
        x = x + sinusoidal_table(positions, layout.dim)

    if layout.doubled and domain is not None:
        rgb, alpha = x[..., : layout.video_len, :], x[..., layout.video_len :, :]
        x = torch.cat([rgb, alpha + domain.expand(layout.video_len)], dim=-2)

    return EmbeddedTokens(tokens=x, positions=positions, scheme=scheme)
