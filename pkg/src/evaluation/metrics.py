"""
Evaluation metrics for generated RGBA videos.

- flow difference: mean per-pixel Euclidean distance between the dense
  Farnebäck flow of the RGB video and that of the alpha video.
- alignment IoU: overlap between the binarised generated alpha and the
  foreground implied by the RGB frames.
"""
from typing import Dict, Iterable, Optional

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.utils.exceptions import FlowParameterError, InsufficientFramesError, ShapeError, UndefinedScoreError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
THRESHOLD_SLACK = 1e-3
FOREGROUND_QUANTILE = 0.995

_TRIMMED = set()


class FlowParams(BaseModel):
    """Farnebäck parameters (defaults follow the common OpenCV usage)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    pyramid_scale: float = 0.5
    levels: int = Field(3, ge=0)
    window: int = 15
    iterations: int = Field(3, ge=1)
    poly_n: int = Field(5, ge=1)
    poly_sigma: float = Field(1.2, gt=0)

    def check(self) -> None:
        if not 0.0 < self.pyramid_scale < 1.0:
            raise FlowParameterError(f"pyramid_scale must lie in (0, 1), got {self.pyramid_scale}")
        if self.window < 1 or self.window % 2 == 0:
            raise FlowParameterError(f"window must be a positive odd integer, got {self.window}")


def to_grayscale(frame: np.ndarray) -> np.ndarray:
    """
    Luma of RGB frames; single-channel input (alpha) passes through unchanged.

    Args:
        frame: [..., H, W, 3], [..., H, W, 1] or [H, W]

    Returns:
        Gray values [..., H, W]
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim >= 3 and frame.shape[-1] == 3:
        return frame @ LUMA_WEIGHTS
    if frame.ndim >= 3 and frame.shape[-1] == 1:
        return frame[..., 0]
    return frame


def _pyramid_levels(params: FlowParams, height: int, width: int) -> int:
    """Coarser pyramid levels (OpenCV's ``levels``) whose smaller side still covers the window."""
    side = min(height, width)
    if side < params.window:
        raise FlowParameterError(f"{height}x{width} frames are smaller than window {params.window}")
    levels = 0
    while levels < params.levels and side * params.pyramid_scale ** (levels + 1) >= params.window:
        levels += 1
    if levels < params.levels and (params.levels, height, width) not in _TRIMMED:
        _TRIMMED.add((params.levels, height, width))
        logger.warning(f"Flow pyramid trimmed from {params.levels} to {levels} levels for {height}x{width}")
    return levels


def farneback_flow(prev: np.ndarray, nxt: np.ndarray, params: Optional[FlowParams] = None) -> np.ndarray:
    """
    Dense optical flow between two gray frames in [0, 1].

    Returns:
        FlowField [H, W, 2] of (dx, dy) displacements in pixels
    """
    params = params or FlowParams()
    params.check()
    if prev.shape != nxt.shape or prev.ndim != 2:
        raise ShapeError(f"Flow needs two equal 2-D frames, got {prev.shape} and {nxt.shape}")

    levels = _pyramid_levels(params, *prev.shape)
    flow = cv2.calcOpticalFlowFarneback(
        (prev * 255.0).astype(np.float32),
        (nxt * 255.0).astype(np.float32),
        None,
        params.pyramid_scale,
        levels,
        params.window,
        params.iterations,
        params.poly_n,
        params.poly_sigma,
        0,
    )
    return flow.astype(np.float64)


def video_flows(video: np.ndarray, params: Optional[FlowParams] = None) -> np.ndarray:
    """Flow of every consecutive frame pair, [F-1, H, W, 2]."""
    gray = to_grayscale(video)
    if gray.shape[0] < 2:
        raise InsufficientFramesError(f"Flow needs at least 2 frames, got {gray.shape[0]}")
    return np.stack([farneback_flow(gray[i], gray[i + 1], params) for i in range(gray.shape[0] - 1)])


def flow_difference(rgb_video: np.ndarray, alpha_video: np.ndarray, params: Optional[FlowParams] = None) -> float:
    """
    Mean per-pixel Euclidean distance between the two videos' flow fields.

    Args:
        rgb_video: [F, H, W, 3] (or any single-channel video)
        alpha_video: [F, H, W] or [F, H, W, 1] (or RGB)
        params: Farnebäck parameters

    Returns:
        Non-negative scalar, averaged over all pixels and frame pairs
    """
    first, second = to_grayscale(rgb_video), to_grayscale(alpha_video)
    if first.shape != second.shape:
        raise ShapeError(f"Videos differ in shape: {first.shape} vs {second.shape}")
    if first.shape[0] < 2:
        raise InsufficientFramesError(f"Flow difference needs at least 2 frames, got {first.shape[0]}")
    delta = video_flows(first, params) - video_flows(second, params)
    return float(np.mean(np.sqrt(np.sum(delta * delta, axis=-1))))


def foreground_from_rgb(rgb_video: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """
    Foreground mask from distance to the achromatic (grey) axis.

    A pixel is foreground when its chroma distance reaches ``threshold`` times
    the 99.5th-percentile distance of the whole video.
    """
    rgb = np.asarray(rgb_video, dtype=np.float64)[..., :3]
    deviation = rgb - rgb.mean(axis=-1, keepdims=True)
    distance = np.sqrt(np.sum(deviation * deviation, axis=-1))
    scale = np.quantile(distance, FOREGROUND_QUANTILE)
    if scale <= 0:
        return np.zeros(distance.shape, dtype=bool)
    return distance >= (threshold - THRESHOLD_SLACK) * scale


def mask_iou(first: np.ndarray, second: np.ndarray) -> float:
    """Mean per-frame IoU over frames whose union is nonempty."""
    if first.shape != second.shape:
        raise ShapeError(f"Masks differ in shape: {first.shape} vs {second.shape}")
    axes = tuple(range(1, first.ndim))
    union = np.sum(first | second, axis=axes)
    intersection = np.sum(first & second, axis=axes)
    scored = union > 0
    if not scored.any():
        raise UndefinedScoreError("Both masks are empty in every frame")
    return float(np.mean(intersection[scored] / union[scored]))


def alpha_alignment_iou(generated_alpha: np.ndarray, rgb_video: np.ndarray, threshold: float = 0.5) -> float:
    """
    Mean per-frame IoU between the binarised alpha and the RGB-derived foreground.

    Args:
        generated_alpha: [F, H, W] (or [F, H, W, 1])
        rgb_video: [F, H, W, 3]
        threshold: Binarisation threshold for both masks
    """
    alpha = to_grayscale(generated_alpha)
    if alpha.shape != rgb_video.shape[:-1]:
        raise ShapeError(f"Alpha {alpha.shape} does not match RGB {rgb_video.shape}")
    return mask_iou(alpha >= threshold - THRESHOLD_SLACK, foreground_from_rgb(rgb_video, threshold))


def best_reference_iou(
    rgb_video: np.ndarray,
    reference_alphas: Iterable[np.ndarray],
    threshold: float = 0.5,
) -> float:
    """
    Foreground IoU of an RGB video against its closest ground-truth matte.

    A sampled video has no paired scene, so it is scored against every
    reference alpha video (e.g. all training scenes of its class) and the
    best match is kept.

    Args:
        rgb_video: [F, H, W, 3]
        reference_alphas: Ground-truth alpha videos [F, H, W]
        threshold: Binarisation threshold for both masks
    """
    foreground = foreground_from_rgb(rgb_video, threshold)
    best = None
    for alpha in reference_alphas:
        reference = to_grayscale(alpha) >= threshold - THRESHOLD_SLACK
        try:
            score = mask_iou(foreground, reference)
        except UndefinedScoreError:
            continue
        best = score if best is None else max(best, score)
    if best is None:
        raise UndefinedScoreError("No reference matte gives a defined IoU")
    return best


class VideoMetrics:
    """Scores RGBA videos with the flow and alignment metrics."""

    def __init__(self, params: Optional[FlowParams] = None, threshold: float = 0.5):
        self.params = params or FlowParams()
        self.threshold = threshold

    def score(self, video: np.ndarray) -> Dict[str, float]:
        """
        Score one RGBA video [F, H, W, 4].

        Returns:
            Dictionary with ``flow_difference`` and ``alignment_iou``
            (None when the IoU is undefined)
        """
        rgb, alpha = video[..., :3], video[..., 3:4]
        result = {"flow_difference": flow_difference(rgb, alpha, self.params)}
        try:
            result["alignment_iou"] = alpha_alignment_iou(alpha, rgb, self.threshold)
        except UndefinedScoreError:
            logger.warning("Alignment IoU undefined: empty foreground and alpha")
            result["alignment_iou"] = None
        return result

    @staticmethod
    def aggregate(scores) -> Dict[str, Optional[float]]:
        """Means over per-video scores, ignoring undefined values."""
        summary = {}
        for key in ("flow_difference", "alignment_iou"):
            values = [s[key] for s in scores if s.get(key) is not None]
            summary[key] = float(np.mean(values)) if values else None
        summary["videos"] = len(scores)
        return summary
