"""
Matte preprocessing for training videos: mask refinement, colour
decontamination and static-background blurring.
"""
from enum import Enum
from typing import Optional

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.utils.exceptions import ContractError, ShapeError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

CHOKE_EPS = 1e-6
DEFAULT_BLUR_KERNEL = 201


class Orientation(str, Enum):
    """Which side of the mask the decontamination blend pulls toward the background."""

    AS_PRINTED = "as_printed"
    INVERTED = "inverted"


class PreprocessConfig(BaseModel):
    """Preprocessing applied to RGBA videos when tokens are loaded for training."""

    model_config = ConfigDict(extra="forbid")

    decontaminate: bool = False
    orientation: Orientation = Orientation.AS_PRINTED
    gain: float = Field(1.1, gt=0)
    choke: float = Field(0.5, ge=0, le=1)
    blur: bool = False
    blur_kernel: int = Field(DEFAULT_BLUR_KERNEL, ge=1)


def refine_mask(alpha: np.ndarray, gain: float = 1.1, choke: float = 0.5) -> np.ndarray:
    """
    Edge-sharpening map ``clip(alpha * gain, 0, 1) ** (1 / (1 - choke + 1e-6))``.

    Monotone and maps [0, 1] into [0, 1].
    """
    if gain <= 0:
        raise ContractError(f"gain must be positive, got {gain}")
    if not 0.0 <= choke <= 1.0:
        raise ContractError(f"choke must lie in [0, 1], got {choke}")
    scaled = np.clip(np.asarray(alpha, dtype=np.float64) * gain, 0.0, 1.0)
    return scaled ** (1.0 / (1.0 - choke + CHOKE_EPS))


def decontaminate_with_mask(
    rgb: np.ndarray,
    mask: np.ndarray,
    background: np.ndarray,
    orientation: Orientation = Orientation.AS_PRINTED,
) -> np.ndarray:
    """
    Blend ``rgb`` with ``background`` under a refined mask.

    as_printed: ``rgb * (1 - mask) + mask * background``
    inverted:   ``rgb * mask + (1 - mask) * background``
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == rgb.ndim - 1:
        mask = mask[..., None]
    if Orientation(orientation) is Orientation.AS_PRINTED:
        return rgb * (1.0 - mask) + mask * background
    return rgb * mask + (1.0 - mask) * background


def color_decontaminate(
    rgb: np.ndarray,
    alpha: np.ndarray,
    background: np.ndarray,
    gain: float = 1.1,
    choke: float = 0.5,
    orientation: Orientation = Orientation.AS_PRINTED,
) -> np.ndarray:
    """
    Decontaminate RGB frames using the refined alpha matte.

    Args:
        rgb: Frames [..., H, W, 3]
        alpha: Mattes [..., H, W]
        background: Background [H, W, 3] (broadcast over frames) or per-frame
        gain, choke: Mask refinement parameters
        orientation: Blend direction

    Returns:
        Decontaminated frames, same shape as ``rgb``
    """
    if rgb.shape[:-1] != alpha.shape:
        raise ShapeError(f"RGB {rgb.shape} and alpha {alpha.shape} disagree")
    if background.shape[-3:] != rgb.shape[-3:]:
        raise ShapeError(f"Background {background.shape} does not match frames {rgb.shape}")
    return decontaminate_with_mask(rgb, refine_mask(alpha, gain, choke), background, orientation)


def effective_kernel(kernel: int, height: int, width: int) -> int:
    """Largest odd kernel not above ``kernel`` that fits inside the frame."""
    size = min(kernel, height, width)
    if size % 2 == 0:
        size -= 1
    size = max(size, 1)
    if size != kernel:
        logger.warning(f"Blur kernel {kernel} clamped to {size} for {height}x{width} frames")
    return size


def static_background(video: np.ndarray, kernel: int = DEFAULT_BLUR_KERNEL) -> np.ndarray:
    """Gaussian blur (sigma = kernel / 6) of the first frame's RGB, [H, W, 3]."""
    if video.ndim != 4 or video.shape[0] < 1:
        raise ShapeError(f"Expected a non-empty [F, H, W, C] video, got {video.shape}")
    if kernel % 2 == 0:
        raise ContractError(f"Blur kernel must be odd, got {kernel}")
    height, width = video.shape[1:3]
    size = effective_kernel(kernel, height, width)
    first = np.ascontiguousarray(video[0, ..., :3], dtype=np.float64)
    return cv2.GaussianBlur(first, (size, size), sigmaX=size / 6.0, sigmaY=size / 6.0)


def composite_over_background(video: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Straight-alpha composite of every frame's foreground over one static background."""
    alpha = video[..., 3:4]
    rgb = video[..., :3] * alpha + background[None] * (1.0 - alpha)
    return np.concatenate([rgb, alpha], axis=-1)


def blur_background(video: np.ndarray, kernel: int = DEFAULT_BLUR_KERNEL) -> np.ndarray:
    """Replace the background of an RGBA video with its blurred first frame."""
    return composite_over_background(video, static_background(video, kernel))


def checkerboard(height: int, width: int, cell: int = 4) -> np.ndarray:
    """Light/dark grey checkerboard [H, W, 3] for transparency previews."""
    rows = (np.arange(height) // cell)[:, None]
    cols = (np.arange(width) // cell)[None, :]
    board = np.where((rows + cols) % 2 == 0, 0.8, 0.6)
    return np.repeat(board[..., None], 3, axis=-1)


def checkerboard_preview(video: np.ndarray, cell: int = 4) -> np.ndarray:
    """RGB frames of an RGBA video composited over a checkerboard."""
    board = checkerboard(video.shape[1], video.shape[2], cell)
    return composite_over_background(video, board)[..., :3]


def preprocess_video(video: np.ndarray, config: Optional[PreprocessConfig] = None) -> np.ndarray:
    """Colour decontamination followed by background blurring, each when enabled."""
    config = config or PreprocessConfig()
    if config.decontaminate:
        background = static_background(video, config.blur_kernel)
        rgb = color_decontaminate(
            video[..., :3], video[..., 3], background, config.gain, config.choke, config.orientation
        )
        video = np.concatenate([np.clip(rgb, 0.0, 1.0), video[..., 3:4]], axis=-1)
    if config.blur:
        video = blur_background(video, config.blur_kernel)
    return video
