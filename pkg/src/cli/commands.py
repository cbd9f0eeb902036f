"""
Command handlers: dataset generation, training, sampling, evaluation and ablation.

Every handler takes a validated ExperimentConfig, writes its artifacts below
``config.output_dir`` and finishes with a RunManifest.
"""
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from src.cli.experiment import ExperimentConfig, ExperimentPaths, RunManifest
from src.data.collectors.scene_generator import NUM_CONDITIONS, generate_specs, synthesize_scene
from src.data.database.frame_store import FrameStore, VideoManifest, load_token_dataset, read_video
from src.evaluation.metrics import VideoMetrics
from src.models.attention import MaskMode
from src.models.checkpoint import Checkpoint, load_checkpoint
from src.models.diffusion import SamplerConfig, sample
from src.models.dit import JointDesign, VideoDiT
from src.models.training import finetune_rgba, pretrain_base
from src.utils.exceptions import ConfigurationError, IngestionError, NoInputError
from src.utils.helpers import atomic_write_json, directory_hash, ensure_dir, file_hash
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

PHASES = ("pretrain", "finetune")


def cmd_gen_dataset(config: ExperimentConfig) -> Path:
    """Render ``dataset.n_scenes`` synthetic scenes as frame files plus manifests."""
    paths = ExperimentPaths(config.output_dir)
    run = RunManifest(command="gen-dataset", config=config.echo())
    data = config.dataset
    logger.info(f"Generating {data.n_scenes} scenes (seed {data.seed}) into {paths.dataset}")

    try:
        store = FrameStore(ensure_dir(paths.dataset))
    except OSError as e:
        raise IngestionError(f"Cannot write dataset directory {paths.dataset}: {e}") from e

    for index, spec in enumerate(generate_specs(data.n_scenes, data.seed)):
        video, cond_id = synthesize_scene(spec, data.frames, data.height, data.width)
        manifest = VideoManifest(
            frames=data.frames,
            height=data.height,
            width=data.width,
            fps=data.fps,
            cond_id=cond_id,
            seed=spec.seed,
            spec=spec.to_dict(),
        )
        store.write_video(f"scene_{index:05d}", video, manifest)

    run.outputs["dataset"] = directory_hash(paths.dataset)
    run.details["n_scenes"] = data.n_scenes
    run.finish(paths)
    logger.info(f"Dataset written: hash {run.outputs['dataset'][:12]}")
    return paths.dataset


def cmd_train(config: ExperimentConfig, phase: str) -> Dict:
    """
    Pretrain the base model or fine-tune it for RGBA.

    Returns:
        Training summary (steps, final loss, trainable set, checkpoint hash)
    """
    if phase not in PHASES:
        raise ConfigurationError(f"phase must be one of {PHASES}, got {phase!r}")
    paths = ExperimentPaths(config.output_dir)
    run = RunManifest(command=f"train-{phase}", config=config.echo())
    run.inputs["dataset"] = directory_hash(paths.dataset)

    if phase == "pretrain":
        dataset = load_token_dataset(paths.dataset, config.model.patch, doubled=False)
        result = pretrain_base(
            config.model, dataset, config.objective, config.training, paths.base_checkpoint
        )
        target = paths.base_checkpoint
    else:
        base = load_checkpoint(paths.base_checkpoint)
        run.inputs["base_checkpoint"] = file_hash(paths.base_checkpoint)
        dataset = load_token_dataset(
            paths.dataset, config.model.patch, doubled=True, preprocess=config.dataset.preprocess
        )
        target = paths.finetune_checkpoint(config.joint_design, config.mask_mode)
        result = finetune_rgba(
            base, dataset, config.mask_mode, config.joint_design,
            config.objective, config.training, target,
        )

    run.losses = result.losses
    run.outputs["checkpoint_content"] = result.checkpoint.content_hash
    run.outputs["checkpoint"] = file_hash(target)
    run.details.update(result.summary())
    run.finish(paths)
    summary = result.summary()
    summary["checkpoint"] = str(target)
    summary["checkpoint_hash"] = result.checkpoint.content_hash
    return summary


def _sampling_setup(checkpoint: Checkpoint, config: ExperimentConfig):
    model = checkpoint.build_model()
    design = checkpoint.design or JointDesign.SEQUENCE_EXTENSION
    mode = MaskMode(checkpoint.metadata.get("mode", config.mask_mode))
    return model, design, mode


def sample_videos(
    model: VideoDiT,
    design: JointDesign,
    mode: MaskMode,
    sampler: SamplerConfig,
    cond_ids: Sequence[int],
    out_dir: Union[str, Path],
    fps: int = 8,
) -> List[Path]:
    """
    Sample one RGBA video per condition id (seed ``sampler.seed + i``) into ``out_dir``.

    Each video directory holds RGBA, RGB, alpha and checkerboard-preview frames.
    """
    store = FrameStore(out_dir)
    config = model.config
    written = []
    for index, cond_id in enumerate(cond_ids):
        seeded = sampler.model_copy(update={"seed": sampler.seed + index})
        video = sample(model, int(cond_id), seeded, mode=mode, design=design)
        manifest = VideoManifest(
            kind="sample",
            frames=config.frames,
            height=config.height,
            width=config.width,
            fps=fps,
            cond_id=int(cond_id),
            seed=seeded.seed,
            extra={"steps": sampler.steps, "design": design.value, "mask_mode": mode.value},
        )
        written.append(
            store.write_video(f"sample_{index:03d}", video, manifest, with_channels=True, with_preview=True)
        )
    return written


def cmd_sample(
    config: ExperimentConfig,
    checkpoint: Optional[Union[str, Path]] = None,
    cond_ids: Optional[Sequence[int]] = None,
    seed: Optional[int] = None,
    steps: Optional[int] = None,
    coarse_steps: Optional[int] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> Dict:
    """
    Sample RGBA videos from a checkpoint.

    Args:
        config: Experiment configuration
        checkpoint: Checkpoint file (defaults to the configured fine-tune leg)
        cond_ids: Condition ids (defaults to ``evaluation.n_videos`` ids cycling the class table)
        seed: Base seed (defaults to ``sampler.seed``)
        steps: Sampling steps (defaults to ``sampler.steps``)
        coarse_steps: Also sample with this many steps and report the largest deviation
        out_dir: Output directory (defaults to ``<output_dir>/samples``)
    """
    paths = ExperimentPaths(config.output_dir)
    source = Path(checkpoint) if checkpoint else paths.finetune_checkpoint(config.joint_design, config.mask_mode)
    loaded = load_checkpoint(source)
    model, design, mode = _sampling_setup(loaded, config)

    sampler = config.sampler.model_copy(
        update={
            "seed": config.sampler.seed if seed is None else seed,
            "steps": config.sampler.steps if steps is None else steps,
        }
    )
    if cond_ids is None:
        cond_ids = [i % NUM_CONDITIONS for i in range(config.evaluation.n_videos)]
    target = Path(out_dir) if out_dir else paths.samples

    run = RunManifest(command="sample", config=config.echo())
    run.inputs["checkpoint"] = file_hash(source)
    logger.info(f"Sampling {len(cond_ids)} videos with {sampler.steps} steps from {source}")
    written = sample_videos(model, design, mode, sampler, cond_ids, target, config.dataset.fps)
    run.outputs = {directory.name: directory_hash(directory) for directory in written}

    summary = {"videos": [str(d) for d in written], "steps": sampler.steps, "hashes": dict(run.outputs)}
    coarse_steps = coarse_steps or config.evaluation.coarse_steps
    if coarse_steps:
        deviations = []
        for index, cond_id in enumerate(cond_ids):
            base = sampler.model_copy(update={"seed": sampler.seed + index})
            coarse = base.model_copy(update={"steps": coarse_steps})
            fine_video = sample(model, int(cond_id), base, mode=mode, design=design)
            coarse_video = sample(model, int(cond_id), coarse, mode=mode, design=design)
            deviations.append(float(np.max(np.abs(fine_video - coarse_video))))
        summary["discretisation_check"] = {
            "steps": sampler.steps,
            "coarse_steps": coarse_steps,
            "max_abs_diff": max(deviations),
            "mean_max_abs_diff": float(np.mean(deviations)),
        }
        logger.info(f"Steps {sampler.steps} vs {coarse_steps}: max abs diff {max(deviations):.4f}")

    run.details.update(summary)
    run.finish(paths)
    return summary


def evaluate_video_dirs(
    directories: Iterable[Union[str, Path]],
    metrics: VideoMetrics,
) -> Dict:
    """
    Score every video directory.

    Returns:
        Record with per-video scores, input hashes and aggregates
    """
    videos = []
    for directory in directories:
        directory = Path(directory)
        video, _ = read_video(directory)
        scores = metrics.score(video)
        videos.append({"video": str(directory), "hash": directory_hash(directory), **scores})
    if not videos:
        raise NoInputError("No sampled videos to evaluate")
    return {
        "flow_params": metrics.params.model_dump(),
        "iou_threshold": metrics.threshold,
        "videos": videos,
        "aggregate": VideoMetrics.aggregate(videos),
    }


def _expand_inputs(inputs: Sequence[Union[str, Path]]) -> List[Path]:
    directories = []
    for item in inputs:
        path = Path(item)
        if (path / "manifest.json").is_file():
            directories.append(path)
        elif path.is_dir():
            directories.extend(FrameStore(path).list_videos())
        else:
            raise NoInputError(f"No such video directory: {path}")
    return directories


def cmd_eval(config: ExperimentConfig, inputs: Optional[Sequence[Union[str, Path]]] = None) -> Dict:
    """Compute flow difference and alignment IoU for sampled videos and write a metrics record."""
    paths = ExperimentPaths(config.output_dir)
    directories = _expand_inputs(inputs or [paths.samples])
    if not directories:
        raise NoInputError(f"No sampled videos found in {[str(i) for i in inputs or [paths.samples]]}")

    metrics = VideoMetrics(config.evaluation.flow, config.evaluation.iou_threshold)
    record = evaluate_video_dirs(directories, metrics)
    record["config"] = config.echo()

    target = atomic_write_json(ensure_dir(paths.metrics) / "metrics.json", record)
    run = RunManifest(command="eval", config=config.echo(), metrics=record["aggregate"])
    run.inputs = {v["video"]: v["hash"] for v in record["videos"]}
    run.outputs["metrics"] = file_hash(target)
    run.finish(paths)
    logger.info(f"Evaluated {len(directories)} videos: {record['aggregate']}")
    return record


def cmd_ablate(config: ExperimentConfig, workers: Optional[int] = None) -> Dict:
    """Fine-tune, sample and evaluate every leg of the ablation matrix."""
    from src.evaluation.benchmark import AblationRunner

    return AblationRunner(config).run(workers or config.evaluation.workers)
