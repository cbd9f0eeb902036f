"""
Synthetic RGBA sprite videos with exact ground-truth alpha.

A coloured sprite (circle, square, triangle or ring) moves over a smooth grey
procedural texture. Alpha is the anti-aliased pixel coverage of the sprite,
and RGB is its straight-alpha composite over the background.
"""
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Dict, List, Tuple

import cv2
import numpy as np

from src.utils.exceptions import SceneSpecError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

MIN_CHROMA = 0.25
SUPERSAMPLE = 4
SPRITE_RADIUS = 0.25


class Shape(str, Enum):
    CIRCLE = "circle"
    SQUARE = "square"
    TRIANGLE = "triangle"
    RING = "ring"


class Motion(str, Enum):
    TRANSLATE = "translate"
    SPIN = "spin"
    BOUNCE = "bounce"
    SCALE = "scale"


SHAPES = list(Shape)
MOTIONS = list(Motion)
NUM_CONDITIONS = len(SHAPES) * len(MOTIONS)


def condition_id(shape: Shape, motion: Motion) -> int:
    return SHAPES.index(Shape(shape)) * len(MOTIONS) + MOTIONS.index(Motion(motion))


def condition_classes() -> Dict[int, Tuple[Shape, Motion]]:
    """Class table: condition id -> (shape, motion)."""
    return {condition_id(s, m): (s, m) for s in SHAPES for m in MOTIONS}


@dataclass(frozen=True)
class SceneSpec:
    shape: Shape
    motion: Motion
    fg_color: Tuple[float, float, float]
    bg_texture_seed: int
    seed: int

    def __post_init__(self):
        try:
            object.__setattr__(self, "shape", Shape(self.shape))
            object.__setattr__(self, "motion", Motion(self.motion))
        except ValueError as e:
            raise SceneSpecError(str(e)) from e
        color = tuple(float(c) for c in self.fg_color)
        if len(color) != 3 or not all(0.0 <= c <= 1.0 for c in color):
            raise SceneSpecError(f"fg_color must be an RGB triple in [0, 1], got {self.fg_color}")
        if max(color) - min(color) < MIN_CHROMA:
            raise SceneSpecError(f"fg_color {color} is too close to grey")
        object.__setattr__(self, "fg_color", color)

    @property
    def cond_id(self) -> int:
        return condition_id(self.shape, self.motion)

    def to_dict(self) -> dict:
        data = asdict(self)
        data.update(shape=self.shape.value, motion=self.motion.value, fg_color=list(self.fg_color))
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        return cls(
            shape=data["shape"],
            motion=data["motion"],
            fg_color=tuple(data["fg_color"]),
            bg_texture_seed=int(data["bg_texture_seed"]),
            seed=int(data["seed"]),
        )


def random_spec(rng: np.random.Generator, cond_id: int) -> SceneSpec:
    """Draw a scene of the given class with a random chromatic colour and seeds."""
    shape, motion = condition_classes()[cond_id]
    while True:
        color = rng.uniform(0.0, 1.0, size=3)
        if color.max() - color.min() >= MIN_CHROMA + 0.1:
            break
    return SceneSpec(
        shape=shape,
        motion=motion,
        fg_color=tuple(float(c) for c in color),
        bg_texture_seed=int(rng.integers(0, 2 ** 31 - 1)),
        seed=int(rng.integers(0, 2 ** 31 - 1)),
    )


def generate_specs(n_scenes: int, seed: int) -> List[SceneSpec]:
    """``n_scenes`` specs cycling through the class table."""
    rng = np.random.default_rng(seed)
    return [random_spec(rng, index % NUM_CONDITIONS) for index in range(n_scenes)]


def render_background(spec: SceneSpec, height: int, width: int) -> np.ndarray:
    """Smooth grey texture [H, W, 3] with R = G = B."""
    rng = np.random.default_rng(spec.bg_texture_seed)
    coarse = rng.uniform(0.2, 0.8, size=(4, 4)).astype(np.float32)
    smooth = cv2.resize(coarse, (width, height), interpolation=cv2.INTER_CUBIC)
    grey = np.clip(smooth.astype(np.float64), 0.0, 1.0)
    return np.repeat(grey[..., None], 3, axis=-1)


def _inside(shape: Shape, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if shape is Shape.CIRCLE:
        return x * x + y * y <= 1.0
    if shape is Shape.SQUARE:
        return np.maximum(np.abs(x), np.abs(y)) <= 0.8
    if shape is Shape.TRIANGLE:
        root3 = math.sqrt(3.0)
        return (y >= -0.5) & (y <= 1.0 - root3 * x) & (y <= 1.0 + root3 * x)
    radius2 = x * x + y * y
    return (radius2 <= 1.0) & (radius2 >= 0.55 ** 2)


def _trajectory(spec: SceneSpec, frames: int, height: int, width: int):
    """Per-frame (cx, cy, radius, angle) of the sprite."""
    rng = np.random.default_rng(spec.seed)
    side = min(height, width)
    radius = SPRITE_RADIUS * side
    low = np.array([radius, radius])
    high = np.array([width - radius, height - radius])
    start = rng.uniform(low, high)
    end = rng.uniform(low, high)
    angle0 = rng.uniform(0.0, 2.0 * math.pi)

    states = []
    for f in range(frames):
        u = f / max(frames - 1, 1)
        cx, cy, r, angle = start[0], start[1], radius, angle0
        if spec.motion is Motion.TRANSLATE:
            cx, cy = start + u * (end - start)
        elif spec.motion is Motion.SPIN:
            angle = angle0 + 2.0 * math.pi * u
        elif spec.motion is Motion.BOUNCE:
            cx = start[0] + u * (end[0] - start[0])
            floor = high[1]
            cy = floor - (floor - low[1]) * abs(math.sin(2.0 * math.pi * u))
        else:
            r = radius * (0.6 + 0.4 * (0.5 - 0.5 * math.cos(2.0 * math.pi * u)))
        states.append((float(cx), float(cy), float(r), float(angle)))
    return states


def render_alpha(spec: SceneSpec, frames: int, height: int, width: int, supersample: int = SUPERSAMPLE) -> np.ndarray:
    """Anti-aliased coverage alpha [F, H, W] by ``supersample``² sub-pixel sampling."""
    offsets = (np.arange(supersample) + 0.5) / supersample
    ys = (np.arange(height)[:, None] + offsets[None, :]).reshape(-1)
    xs = (np.arange(width)[:, None] + offsets[None, :]).reshape(-1)
    grid_x, grid_y = np.meshgrid(xs, ys)

    alpha = np.empty((frames, height, width), dtype=np.float64)
    for f, (cx, cy, r, angle) in enumerate(_trajectory(spec, frames, height, width)):
        dx, dy = (grid_x - cx) / r, (grid_y - cy) / r
        cos, sin = math.cos(angle), math.sin(angle)
        local_x = cos * dx + sin * dy
        local_y = -sin * dx + cos * dy
        covered = _inside(spec.shape, local_x, local_y).astype(np.float64)
        alpha[f] = covered.reshape(height, supersample, width, supersample).mean(axis=(1, 3))
        if not alpha[f].any():
            raise SceneSpecError(f"Sprite leaves the frame entirely at frame {f}")
    return alpha


def synthesize_scene(spec: SceneSpec, frames: int, height: int, width: int) -> Tuple[np.ndarray, int]:
    """
    Render one RGBA video.

    Args:
        spec: Scene description
        frames, height, width: Video dimensions

    Returns:
        (video [F, H, W, 4] in [0, 1] with channels R, G, B, A, cond_id)
    """
    if min(frames, height, width) < 1:
        raise SceneSpecError(f"Video dimensions must be positive, got {frames}x{height}x{width}")

    alpha = render_alpha(spec, frames, height, width)[..., None]
    background = render_background(spec, height, width)[None]
    foreground = np.asarray(spec.fg_color, dtype=np.float64)
    rgb = foreground * alpha + background * (1.0 - alpha)
    return np.concatenate([rgb, alpha], axis=-1), spec.cond_id
