"""Pixel/token boundary: patchify, unpatchify and the [0,1] <-> [-1,1] scaling."""
import numpy as np
from einops import rearrange

from src.utils.exceptions import ConfigurationError, ShapeError

PATCH_PATTERN = "f (h p1) (w p2) c -> (f h w) (p1 p2 c)"
UNPATCH_PATTERN = "(f h w) (p1 p2 c) -> f (h p1) (w p2) c"


def to_model_range(pixels: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(pixels, dtype=np.float64) - 1.0


def from_model_range(tokens: np.ndarray) -> np.ndarray:
    return (np.asarray(tokens, dtype=np.float64) + 1.0) / 2.0


def _check_divisible(height: int, width: int, patch: int) -> None:
    if patch < 1 or height % patch or width % patch:
        raise ConfigurationError(f"Frame {height}x{width} is not divisible by patch={patch}")


def patchify(video: np.ndarray, patch: int) -> np.ndarray:
    """
    Flatten non-overlapping patches in (frame, patch-row, patch-col) order.

    Args:
        video: Array [F, H, W, C]
        patch: Patch side

    Returns:
        Tokens [F·(H/patch)·(W/patch), patch·patch·C]
    """
    if video.ndim != 4:
        raise ShapeError(f"Expected a [F, H, W, C] video, got shape {video.shape}")
    _check_divisible(video.shape[1], video.shape[2], patch)
    return rearrange(video, PATCH_PATTERN, p1=patch, p2=patch)


def unpatchify(tokens: np.ndarray, frames: int, height: int, width: int, patch: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    _check_divisible(height, width, patch)
    rows = frames * (height // patch) * (width // patch)
    if tokens.ndim != 2 or tokens.shape[0] != rows or tokens.shape[1] % (patch * patch):
        raise ShapeError(
            f"Tokens of shape {tokens.shape} do not tile a {frames}x{height}x{width} video with patch {patch}"
        )
    return rearrange(tokens, UNPATCH_PATTERN, f=frames, h=height // patch, p1=patch, p2=patch)


def rgb_to_tokens(video: np.ndarray, patch: int) -> np.ndarray:
    """RGB (or the RGB channels of RGBA) pixels -> model-range tokens [L, patch²·3]."""
    return patchify(to_model_range(video[..., :3]), patch)


def rgba_to_tokens(video: np.ndarray, patch: int) -> np.ndarray:
    """
    RGBA pixels -> doubled tokens [2L, patch²·3].

    The alpha half is the alpha channel replicated to three channels so both
    halves share one patch projection.
    """
    if video.shape[-1] != 4:
        raise ShapeError(f"Expected 4 channels, got {video.shape[-1]}")
    alpha = np.repeat(video[..., 3:4], 3, axis=-1)
    return np.concatenate([rgb_to_tokens(video, patch), rgb_to_tokens(alpha, patch)], axis=0)


def tokens_to_rgb(tokens: np.ndarray, frames: int, height: int, width: int, patch: int) -> np.ndarray:
    """Model-range tokens [L, patch²·3] -> RGB video in [0, 1]."""
    return np.clip(from_model_range(unpatchify(tokens, frames, height, width, patch)), 0.0, 1.0)


def tokens_to_rgba(tokens: np.ndarray, frames: int, height: int, width: int, patch: int) -> np.ndarray:
    """
    Doubled tokens [2L, patch²·3] -> RGBA video [F, H, W, 4] in [0, 1].

    Alpha is the mean of the three replicated channels, clamped.
    """
    if tokens.shape[0] % 2:
        raise ShapeError(f"Doubled tokens need an even row count, got {tokens.shape[0]}")
    half = tokens.shape[0] // 2
    rgb = tokens_to_rgb(tokens[:half], frames, height, width, patch)
    alpha = from_model_range(unpatchify(tokens[half:], frames, height, width, patch)).mean(axis=-1)
    return np.concatenate([rgb, np.clip(alpha, 0.0, 1.0)[..., None]], axis=-1)
