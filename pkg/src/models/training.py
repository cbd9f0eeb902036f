"""Base pretraining and RGBA fine-tuning loops."""
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import torch
from pydantic import BaseModel, ConfigDict, Field

from src.models.attention import MaskMode
from src.models.checkpoint import Checkpoint, base_hash, save_checkpoint
from src.models.diffusion import Objective, TokenBatch, training_step
from src.models.dit import DiTConfig, JointDesign, VideoDiT
from src.models.numerics import seed_everything
from src.utils.exceptions import ConfigurationError, FrozenWeightError, TrainingError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)


class TrainingConfig(BaseModel):
    """Optimisation budget for both regimes."""

    model_config = ConfigDict(extra="forbid")

    pretrain_steps: int = Field(2000, ge=0)
    finetune_steps: int = Field(1000, ge=0)
    batch_size: int = Field(8, ge=1)
    pretrain_lr: float = Field(1e-3, gt=0)
    finetune_lr: float = Field(1e-4, gt=0)
    rms_alpha: float = Field(0.99, gt=0, lt=1)
    seed: int = 0
    log_every: int = Field(100, ge=1)


@dataclass
class TrainingRun:
    """Outcome of one training regime."""

    model: VideoDiT
    regime: str
    losses: List[float] = field(default_factory=list)
    trainable_count: int = 0
    trainable_names: List[str] = field(default_factory=list)
    base_hash: str = ""
    wall_time: float = 0.0
    checkpoint: Optional[Checkpoint] = None

    def summary(self) -> dict:
        return {
            "regime": self.regime,
            "steps": len(self.losses),
            "final_loss": self.losses[-1] if self.losses else None,
            "trainable_count": self.trainable_count,
            "trainable_names": self.trainable_names,
            "base_hash": self.base_hash,
            "wall_time": round(self.wall_time, 3),
        }


def make_optimizer(params, lr: float, rms_alpha: float = 0.99) -> torch.optim.Optimizer:
    """Momentum-free RMS-scaled steps."""
    return torch.optim.RMSprop(params, lr=lr, alpha=rms_alpha, eps=1e-8, momentum=0.0)


def draw_batch(dataset: TokenBatch, batch_size: int, generator: torch.Generator) -> TokenBatch:
    """Sample ``batch_size`` scenes with replacement."""
    index = torch.randint(0, len(dataset), (batch_size,), generator=generator)
    return TokenBatch(tokens=dataset.tokens[index], cond_ids=dataset.cond_ids[index])


def _train(
    model: VideoDiT,
    dataset: TokenBatch,
    objective: Objective,
    training: TrainingConfig,
    steps: int,
    lr: float,
    mode: MaskMode,
    design: JointDesign,
    generator: torch.Generator,
) -> List[float]:
    optimizer = make_optimizer(
        [p for p in model.parameters() if p.requires_grad], lr, training.rms_alpha
    )
    model.train()
    losses: List[float] = []
    for step in range(1, steps + 1):
        batch = draw_batch(dataset, training.batch_size, generator)
        try:
            loss = training_step(model, batch, objective, mode, design, optimizer, generator)
        except TrainingError as e:
            logger.error(f"Training diverged at step {step} (seed {training.seed}): {e}")
            raise TrainingError(str(e), seed=training.seed, step=step) from e
        losses.append(loss)
        if step % training.log_every == 0 or step == steps:
            window = losses[-training.log_every:]
            logger.info(f"step {step}/{steps} loss={loss:.6f} mean={sum(window) / len(window):.6f}")
    return losses


def pretrain_base(
    config: DiTConfig,
    dataset: TokenBatch,
    objective: Objective,
    training: TrainingConfig,
    checkpoint_path: Optional[Union[str, Path]] = None,
    steps: Optional[int] = None,
) -> TrainingRun:
    """
    Train the unextended text+RGB network from scratch.

    Args:
        config: Architecture
        dataset: RGB tokens [N, L, patch_dim] with condition ids
        objective: Training objective
        training: Optimisation budget
        checkpoint_path: Where to persist the base checkpoint, if anywhere
        steps: Overrides ``training.pretrain_steps``
    """
    if dataset.tokens.shape[1:] != (config.video_len, config.patch_dim):
        raise ConfigurationError(
            f"Pretraining needs RGB tokens [N x {config.video_len} x {config.patch_dim}], "
            f"got {tuple(dataset.tokens.shape)}"
        )
    steps = training.pretrain_steps if steps is None else steps
    generator = seed_everything(training.seed)
    model = VideoDiT(config)

    logger.info(f"Pretraining base model for {steps} steps on {len(dataset)} scenes")
    started = time.perf_counter()
    losses = _train(
        model, dataset, objective, training, steps, training.pretrain_lr,
        MaskMode.UNMASKED, JointDesign.SEQUENCE_EXTENSION, generator,
    )
    run = TrainingRun(
        model=model,
        regime="pretrain",
        losses=losses,
        trainable_count=model.trainable_parameter_count(),
        trainable_names=model.trainable_names(),
        base_hash=base_hash(model),
        wall_time=time.perf_counter() - started,
    )
    if checkpoint_path is not None:
        run.checkpoint = save_checkpoint(model, checkpoint_path, "pretrain", {"losses": losses})
    return run


def finetune_rgba(
    base: Union[Checkpoint, VideoDiT],
    dataset: TokenBatch,
    mode: MaskMode,
    design: JointDesign,
    objective: Objective,
    training: TrainingConfig,
    checkpoint_path: Optional[Union[str, Path]] = None,
    steps: Optional[int] = None,
) -> TrainingRun:
    """
    Fine-tune a frozen base network for joint RGBA generation.

    Only the design's additions train. The base parameters are hashed before
    and after; any difference raises ``FrozenWeightError``.

    Args:
        base: Base checkpoint or model
        dataset: Doubled RGBA tokens [N, 2L, patch_dim] with condition ids
        mode: Attention mask regime
        design: Joint design to attach
        objective: Training objective
        training: Optimisation budget
        checkpoint_path: Where to persist the adapted checkpoint, if anywhere
        steps: Overrides ``training.finetune_steps``
    """
    generator = seed_everything(training.seed)
    model = base.build_model() if isinstance(base, Checkpoint) else base
    config = model.config
    if dataset.tokens.shape[1:] != (2 * config.video_len, config.patch_dim):
        raise ConfigurationError(
            f"Fine-tuning needs RGBA tokens [N x {2 * config.video_len} x {config.patch_dim}], "
            f"got {tuple(dataset.tokens.shape)}"
        )
    steps = training.finetune_steps if steps is None else steps
    mode, design = MaskMode(mode), JointDesign(design)

    before = base_hash(model)
    model.prepare_finetune(design)
    trainable_names = model.trainable_names()
    logger.info(
        f"Fine-tuning {design.value} under {mode.value} for {steps} steps; "
        f"trainable={model.trainable_parameter_count()}"
    )

    started = time.perf_counter()
    losses = _train(
        model, dataset, objective, training, steps, training.finetune_lr, mode, design, generator
    )
    after = base_hash(model)
    if after != before:
        logger.error("Base parameters changed during fine-tuning")
        raise FrozenWeightError(f"Base hash changed from {before[:12]} to {after[:12]}")

    run = TrainingRun(
        model=model,
        regime="finetune",
        losses=losses,
        trainable_count=model.trainable_parameter_count(),
        trainable_names=trainable_names,
        base_hash=after,
        wall_time=time.perf_counter() - started,
    )
    if checkpoint_path is not None:
        run.checkpoint = save_checkpoint(
            model,
            checkpoint_path,
            "finetune",
            {"losses": losses, "mode": mode.value, "design": design.value},
        )
    return run
