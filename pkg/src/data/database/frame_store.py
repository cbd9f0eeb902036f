"""
On-disk store for RGBA videos: numbered 16-bit PNG frames plus a JSON manifest.

Layout of one video directory::

    frame_0000.png ... frame_{F-1}.png   RGBA, 16 bits per channel
    manifest.json                        VideoManifest
    rgb/, alpha/, preview/               optional per-channel and checkerboard frames
"""
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import cv2
import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.data.processors.matting import PreprocessConfig, checkerboard_preview, preprocess_video
from src.data.processors.patches import rgb_to_tokens, rgba_to_tokens
from src.models.diffusion import TokenBatch
from src.models.numerics import DTYPE
from src.utils.exceptions import IngestionError, NoInputError
from src.utils.helpers import atomic_write_json, ensure_dir
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

MANIFEST_NAME = "manifest.json"
MAX_16BIT = 65535


class VideoManifest(BaseModel):
    """Sidecar describing one stored video."""

    model_config = ConfigDict(extra="forbid")

    version: int = 1
    kind: str = "scene"
    frames: int = Field(ge=1)
    height: int = Field(ge=1)
    width: int = Field(ge=1)
    channels: int = 4
    bit_depth: int = 16
    fps: int = 8
    cond_id: int = Field(ge=0)
    seed: int = 0
    spec: Optional[Dict[str, Any]] = None
    extra: Dict[str, Any] = Field(default_factory=dict)

    def frame_name(self, index: int) -> str:
        return f"frame_{index:04d}.png"


def quantize(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * MAX_16BIT).astype(np.uint16)


def dequantize(values: np.ndarray) -> np.ndarray:
    return values.astype(np.float64) / MAX_16BIT


def _write_png(path: Path, pixels: np.ndarray) -> None:
    if pixels.ndim == 3 and pixels.shape[-1] == 4:
        pixels = cv2.cvtColor(pixels, cv2.COLOR_RGBA2BGRA)
    elif pixels.ndim == 3 and pixels.shape[-1] == 3:
        pixels = cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), pixels):
        raise IngestionError(f"Could not write frame file {path}")


def _read_png(path: Path, channels: int) -> np.ndarray:
    if not path.is_file():
        raise IngestionError(f"Missing frame file {path}")
    pixels = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if pixels is None:
        raise IngestionError(f"Unreadable frame file {path}")
    if pixels.dtype != np.uint16:
        raise IngestionError(f"Frame file {path} is {pixels.dtype}, expected 16-bit samples")
    found = 1 if pixels.ndim == 2 else pixels.shape[-1]
    if found != channels:
        raise IngestionError(f"Frame file {path} has {found} channels, expected {channels}")
    if channels == 4:
        pixels = cv2.cvtColor(pixels, cv2.COLOR_BGRA2RGBA)
    return pixels


def read_manifest(directory: Union[str, Path]) -> VideoManifest:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise IngestionError(f"Missing manifest {path}")
    try:
        return VideoManifest.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as e:
        raise IngestionError(f"Malformed manifest {path}: {e}") from e


def read_video(directory: Union[str, Path]) -> Tuple[np.ndarray, VideoManifest]:
    """Load the RGBA video [F, H, W, 4] in [0, 1] stored in ``directory`` and its manifest."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    frames = []
    for index in range(manifest.frames):
        path = directory / manifest.frame_name(index)
        pixels = _read_png(path, 4)
        if pixels.shape[:2] != (manifest.height, manifest.width):
            raise IngestionError(
                f"Frame file {path} is {pixels.shape[1]}x{pixels.shape[0]}, "
                f"manifest says {manifest.width}x{manifest.height}"
            )
        frames.append(dequantize(pixels))
    return np.stack(frames), manifest


class FrameStore:
    """Reads and writes videos below a root directory."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def video_dir(self, name: str) -> Path:
        return self.root / name

    def write_video(
        self,
        name: str,
        video: np.ndarray,
        manifest: VideoManifest,
        with_channels: bool = False,
        with_preview: bool = False,
    ) -> Path:
        """
        Persist an RGBA video [F, H, W, 4] in [0, 1].

        Args:
            name: Directory name below the root
            video: RGBA samples
            manifest: Sidecar; its dims must match ``video``
            with_channels: Also write ``rgb/`` and ``alpha/`` frames
            with_preview: Also write 8-bit checkerboard previews to ``preview/``
        """
        if video.shape != (manifest.frames, manifest.height, manifest.width, 4):
            raise IngestionError(
                f"Video shape {video.shape} does not match manifest "
                f"({manifest.frames}, {manifest.height}, {manifest.width}, 4)"
            )
        directory = ensure_dir(self.video_dir(name))
        quantized = quantize(video)
        for index in range(manifest.frames):
            _write_png(directory / manifest.frame_name(index), quantized[index])

        if with_channels:
            rgb_dir, alpha_dir = ensure_dir(directory / "rgb"), ensure_dir(directory / "alpha")
            for index in range(manifest.frames):
                _write_png(rgb_dir / manifest.frame_name(index), quantized[index, ..., :3])
                _write_png(alpha_dir / manifest.frame_name(index), quantized[index, ..., 3])
        if with_preview:
            preview_dir = ensure_dir(directory / "preview")
            preview = np.round(checkerboard_preview(video) * 255).astype(np.uint8)
            for index in range(manifest.frames):
                _write_png(preview_dir / manifest.frame_name(index), preview[index])

        atomic_write_json(directory / MANIFEST_NAME, manifest.model_dump(mode="json"))
        return directory

    def read_manifest(self, directory: Union[str, Path]) -> VideoManifest:
        return read_manifest(directory)

    def read_video(self, directory: Union[str, Path]) -> Tuple[np.ndarray, VideoManifest]:
        return read_video(directory)

    def list_videos(self) -> List[Path]:
        """Video directories (those holding a manifest) in sorted order."""
        if not self.root.is_dir():
            return []
        return sorted(p.parent for p in self.root.glob(f"*/{MANIFEST_NAME}"))


def load_token_dataset(
    root: Union[str, Path],
    patch: int,
    doubled: bool,
    preprocess: Optional[PreprocessConfig] = None,
    limit: Optional[int] = None,
) -> TokenBatch:
    """
    Load every stored scene as model-range tokens.

    Args:
        root: Dataset directory
        patch: Patch side
        doubled: RGBA tokens [2L, P] when True, RGB tokens [L, P] otherwise
        preprocess: Optional matte preprocessing applied before tokenising
        limit: Load at most this many scenes

    Returns:
        TokenBatch over the whole dataset
    """
    store = FrameStore(root)
    directories = store.list_videos()[:limit]
    if not directories:
        raise NoInputError(f"No videos found under {root}")

    tokens, cond_ids = [], []
    for directory in directories:
        video, manifest = store.read_video(directory)
        if preprocess is not None:
            video = preprocess_video(video, preprocess)
        tokens.append(rgba_to_tokens(video, patch) if doubled else rgb_to_tokens(video, patch))
        cond_ids.append(manifest.cond_id)

    logger.info(f"Loaded {len(tokens)} videos from {root} ({'RGBA' if doubled else 'RGB'} tokens)")
    return TokenBatch(
        tokens=torch.as_tensor(np.stack(tokens), dtype=DTYPE),
        cond_ids=torch.as_tensor(cond_ids, dtype=torch.int64),
    )
