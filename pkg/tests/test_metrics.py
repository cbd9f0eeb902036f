"""
Tests for the Farnebäck flow difference and the alpha alignment IoU.
"""
import cv2
import numpy as np
import pytest

from src.data.collectors.scene_generator import Motion, SceneSpec, Shape, synthesize_scene
from src.evaluation.metrics import (
    FlowParams,
    VideoMetrics,
    _pyramid_levels,
    alpha_alignment_iou,
    best_reference_iou,
    farneback_flow,
    flow_difference,
    foreground_from_rgb,
    mask_iou,
    to_grayscale,
    video_flows,
)
from src.utils.exceptions import FlowParameterError, InsufficientFramesError, ShapeError, UndefinedScoreError

BORDER = 8


def _texture(height: int, width: int, coarse: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    small = rng.uniform(0.0, 1.0, size=(coarse, coarse)).astype(np.float32)
    return np.clip(cv2.resize(small, (width, height), interpolation=cv2.INTER_CUBIC), 0.0, 1.0).astype(np.float64)


def _sliding_sprite(frames: int = 3, size: int = 96, sprite: int = 40, speed: int = 2):
    """Textured sprite moving right over a textured static background, plus its static alpha."""
    background = _texture(size, size, 12, seed=1)
    patch = _texture(sprite, sprite, 8, seed=2)
    top, left = (size - sprite) // 2, 20
    video = np.repeat(background[None], frames, axis=0)
    for f in range(frames):
        x = left + speed * f
        video[f, top : top + sprite, x : x + sprite] = patch
    alpha = np.zeros((frames, size, size))
    alpha[:, top : top + sprite, left : left + sprite] = 1.0
    return video, alpha


def test_to_grayscale_paths():
    rgb = np.ones((2, 3, 3, 3)) * np.array([1.0, 0.0, 0.0])
    assert np.allclose(to_grayscale(rgb), 0.299)
    alpha = np.random.default_rng(0).uniform(size=(2, 3, 3, 1))
    assert np.array_equal(to_grayscale(alpha), alpha[..., 0])
    assert np.array_equal(to_grayscale(alpha[..., 0]), alpha[..., 0])


def test_translation_oracle():
    big = _texture(64, 72, 12, seed=3)
    prev, nxt = big[:, 4:68], big[:, 2:66]

    flow = farneback_flow(prev, nxt)

    interior = flow[BORDER:-BORDER, BORDER:-BORDER]
    assert flow.shape == (64, 64, 2)
    assert abs(interior[..., 0].mean() - 2.0) <= 0.5
    assert abs(interior[..., 1].mean()) <= 0.5


def test_flip_equivariance():
    big = _texture(64, 72, 12, seed=4)
    prev, nxt = big[:, 5:69], big[:, 3:67]

    flow = farneback_flow(prev, nxt)
    flipped = farneback_flow(prev[:, ::-1].copy(), nxt[:, ::-1].copy())[:, ::-1]

    inner = (slice(BORDER, -BORDER), slice(BORDER, -BORDER))
    assert np.mean(np.abs(flipped[inner][..., 0] + flow[inner][..., 0])) <= 1e-3
    assert np.mean(np.abs(flipped[inner][..., 1] - flow[inner][..., 1])) <= 1e-3


def test_static_frames_have_zero_flow():
    frame = _texture(32, 32, 6, seed=5)
    assert np.max(np.abs(farneback_flow(frame, frame))) <= 1e-6


def test_flow_parameter_errors():
    frame = np.zeros((32, 32))
    with pytest.raises(FlowParameterError):
        farneback_flow(frame, frame, FlowParams(window=14))
    with pytest.raises(FlowParameterError):
        farneback_flow(frame, frame, FlowParams(pyramid_scale=1.0))
    with pytest.raises(FlowParameterError):
        farneback_flow(frame[:10, :10], frame[:10, :10])
    with pytest.raises(ShapeError):
        farneback_flow(frame, frame[:16])


def test_pyramid_is_trimmed_to_window():
    params = FlowParams()
    assert _pyramid_levels(params, 64, 64) == 2
    assert _pyramid_levels(params, 15, 40) == 0
    assert _pyramid_levels(params, 256, 256) == 3


def test_video_flows_shape_and_frame_count():
    video, _ = _sliding_sprite(frames=3)
    assert video_flows(video).shape == (2, 96, 96, 2)
    with pytest.raises(InsufficientFramesError):
        video_flows(video[:1])


def test_flow_difference_of_twin_is_zero():
    rgb = np.repeat(_sliding_sprite()[0][..., None], 3, axis=-1)
    twin = to_grayscale(rgb)
    assert flow_difference(rgb, twin) <= 1e-6


def test_misaligned_alpha_oracle():
    """A moving sprite with a static matte differs by roughly speed x sprite area fraction."""
    video, alpha = _sliding_sprite(frames=3, size=96, sprite=40, speed=2)
    expected = 2.0 * (40 * 40) / (96 * 96)

    difference = flow_difference(video, alpha)

    assert abs(difference - expected) <= 0.3 * expected


def test_flow_difference_is_symmetric_and_non_negative():
    video, alpha = _sliding_sprite()
    forward = flow_difference(video, alpha)
    assert forward >= 0.0
    assert abs(forward - flow_difference(alpha, video)) <= 1e-12
    assert flow_difference(video, alpha) == forward


def test_flow_difference_errors():
    video, alpha = _sliding_sprite()
    with pytest.raises(InsufficientFramesError):
        flow_difference(video[:1], alpha[:1])
    with pytest.raises(ShapeError):
        flow_difference(video, alpha[:2])


def _square(size: int, top: int, left: int, side: int) -> np.ndarray:
    mask = np.zeros((1, size, size), dtype=bool)
    mask[0, top : top + side, left : left + side] = True
    return mask


def test_mask_iou_set_arithmetic():
    a = _square(8, 0, 0, 4)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, _square(8, 4, 4, 4)) == 0.0
    assert mask_iou(a, _square(8, 0, 2, 4)) == pytest.approx(1 / 3)


def test_mask_iou_skips_empty_frames_and_rejects_all_empty():
    a = np.concatenate([_square(8, 0, 0, 4), np.zeros((1, 8, 8), dtype=bool)])
    assert mask_iou(a, a) == 1.0
    empty = np.zeros((2, 8, 8), dtype=bool)
    with pytest.raises(UndefinedScoreError):
        mask_iou(empty, empty)


def _red_square_video(left: int) -> np.ndarray:
    rgb = np.full((2, 16, 16, 3), 0.5)
    rgb[:, 4:10, left : left + 6] = [0.9, 0.1, 0.1]
    return rgb


def test_alignment_iou_examples():
    rgb = _red_square_video(left=2)
    matching = np.zeros((2, 16, 16))
    matching[:, 4:10, 2:8] = 1.0
    disjoint = np.zeros((2, 16, 16))
    disjoint[:, 4:10, 9:15] = 1.0

    assert alpha_alignment_iou(matching, rgb) == 1.0
    assert alpha_alignment_iou(disjoint, rgb) == 0.0
    assert alpha_alignment_iou(matching[..., None], rgb) == 1.0


def test_alignment_iou_errors():
    grey = np.full((2, 8, 8, 3), 0.4)
    assert not foreground_from_rgb(grey).any()
    with pytest.raises(UndefinedScoreError):
        alpha_alignment_iou(np.zeros((2, 8, 8)), grey)
    with pytest.raises(ShapeError):
        alpha_alignment_iou(np.zeros((2, 8, 7)), grey)


def test_ground_truth_scene_scores_full_alignment():
    spec = SceneSpec(Shape.SQUARE, Motion.TRANSLATE, (0.9, 0.2, 0.1), bg_texture_seed=5, seed=6)
    video, _ = synthesize_scene(spec, 4, 32, 32)

    scores = VideoMetrics(FlowParams(window=5)).score(video)

    assert scores["alignment_iou"] >= 0.99
    assert scores["flow_difference"] >= 0.0


def test_best_reference_iou_picks_the_matching_matte():
    truth = SceneSpec(Shape.CIRCLE, Motion.TRANSLATE, (0.1, 0.8, 0.3), bg_texture_seed=1, seed=2)
    other = SceneSpec(Shape.CIRCLE, Motion.TRANSLATE, (0.1, 0.8, 0.3), bg_texture_seed=1, seed=40)
    video, _ = synthesize_scene(truth, 3, 32, 32)
    decoy, _ = synthesize_scene(other, 3, 32, 32)

    best = best_reference_iou(video[..., :3], [decoy[..., 3], video[..., 3]])

    assert best >= 0.99
    assert best >= best_reference_iou(video[..., :3], [decoy[..., 3]])


def test_best_reference_iou_undefined_without_foreground():
    grey = np.full((2, 16, 16, 3), 0.4)
    with pytest.raises(UndefinedScoreError):
        best_reference_iou(grey, [np.zeros((2, 16, 16))])


def test_video_metrics_aggregate_ignores_undefined():
    grey = np.concatenate([np.full((2, 16, 16, 3), 0.3), np.zeros((2, 16, 16, 1))], axis=-1)
    metrics = VideoMetrics(FlowParams(window=5))
    empty = metrics.score(grey)
    assert empty["alignment_iou"] is None
    assert empty["flow_difference"] <= 1e-9

    undefined = {"flow_difference": 0.0, "alignment_iou": None}
    summary = VideoMetrics.aggregate([undefined, {"flow_difference": 1.0, "alignment_iou": 0.5}])
    assert summary == {"flow_difference": 0.5, "alignment_iou": 0.5, "videos": 2}
