"""
Flow-matching and DDPM objectives, the training step and the samplers.

Noise convention: ``x0`` is Gaussian noise and ``x1`` is data, so flow matching
integrates the learned velocity from t=0 (noise) to t=1 (data).
"""
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Callable, Optional, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import Tensor

from src.data.processors.patches import tokens_to_rgba, tokens_to_rgb
from src.models.attention import MaskMode
from src.models.dit import JointDesign
from src.models.numerics import DTYPE, backward
from src.utils.exceptions import ConfigurationError, ContractError, TrainingError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

TimeLike = Union[float, Tensor]


class ObjectiveKind(str, Enum):
    FLOW_MATCHING = "flow_matching"
    DDPM = "ddpm"


class Objective(BaseModel):
    """Training objective with its noise schedule and half weights."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: ObjectiveKind = ObjectiveKind.FLOW_MATCHING
    beta_start: float = Field(1e-4, gt=0)
    beta_end: float = Field(0.02, lt=1)
    timesteps: int = Field(1000, ge=1)
    rgb_weight: float = Field(0.5, ge=0)
    alpha_weight: float = Field(0.5, ge=0)

    @model_validator(mode="after")
    def _check_schedule(self) -> "Objective":
        if self.beta_end < self.beta_start:
            raise ConfigurationError("beta_end must not be below beta_start")
        if self.rgb_weight + self.alpha_weight <= 0:
            raise ConfigurationError("At least one half must carry loss weight")
        return self

    def schedule(self) -> "DDPMSchedule":
        return DDPMSchedule(self.beta_start, self.beta_end, self.timesteps)


class SamplerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(50, ge=1)
    seed: int = 0
    objective: Objective = Field(default_factory=Objective)


@dataclass(frozen=True)
class DDPMSchedule:
    """Linear beta schedule indexed by 1-based timesteps."""

    beta_start: float = 1e-4
    beta_end: float = 0.02
    timesteps: int = 1000

    @cached_property
    def betas(self) -> Tensor:
        return torch.linspace(self.beta_start, self.beta_end, self.timesteps, dtype=DTYPE)

    @cached_property
    def alpha_bars(self) -> Tensor:
        return torch.cumprod(1.0 - self.betas, dim=0)

    def alpha_bar(self, t: Union[int, Tensor]) -> Tensor:
        t = torch.as_tensor(t, dtype=torch.int64)
        if ((t < 1) | (t > self.timesteps)).any():
            raise ContractError(f"DDPM timestep outside [1, {self.timesteps}]: {t.tolist()}")
        return self.alpha_bars[t - 1]

    def respaced(self, steps: int) -> Tensor:
        """Descending 1-based timesteps used by a ``steps``-step sampler."""
        if not 1 <= steps <= self.timesteps:
            raise ConfigurationError(f"steps must lie in [1, {self.timesteps}], got {steps}")
        grid = torch.linspace(self.timesteps, 1, steps, dtype=DTYPE).round().to(torch.int64)
        return torch.unique_consecutive(grid)


@dataclass
class TokenBatch:
    """Training batch: tokens [B, rows, patch_dim] and condition ids [B]."""

    tokens: Tensor
    cond_ids: Tensor

    def __len__(self) -> int:
        return self.tokens.shape[0]


def _broadcast_time(t: Tensor, like: Tensor) -> Tensor:
    return t.reshape(t.shape + (1,) * (like.dim() - t.dim()))


def fm_interpolate(x0: Tensor, x1: Tensor, t: TimeLike) -> Tuple[Tensor, Tensor]:
    """
    Point on the straight noise-to-data path and its velocity.

    Args:
        x0: Noise tokens
        x1: Data tokens, same shape as ``x0``
        t: Time in [0, 1], scalar or one per batch element

    Returns:
        (x_t, target velocity ``x1 - x0``)
    """
    if x0.shape != x1.shape:
        raise ContractError(f"Noise {tuple(x0.shape)} and data {tuple(x1.shape)} differ in shape")
    t = torch.as_tensor(t, dtype=DTYPE)
    if ((t < 0) | (t > 1) | ~torch.isfinite(t)).any():
        raise ContractError(f"Flow-matching time outside [0, 1]: {t.tolist()}")
    t = _broadcast_time(t, x0)
    return (1.0 - t) * x0 + t * x1, x1 - x0


def ddpm_q_sample(
    x0: Tensor,
    t: Union[int, Tensor],
    noise: Tensor,
    schedule: Optional[DDPMSchedule] = None,
) -> Tensor:
    """Forward noising ``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise`` for 1-based ``t``."""
    schedule = schedule or DDPMSchedule()
    alpha_bar = _broadcast_time(schedule.alpha_bar(t), x0)
    return torch.sqrt(alpha_bar) * x0 + torch.sqrt(1.0 - alpha_bar) * noise


def half_weighted_mse(prediction: Tensor, target: Tensor, objective: Objective) -> Tensor:
    """MSE with separate weights on the RGB and alpha halves of doubled token rows."""
    if prediction.shape != target.shape:
        raise ContractError(
            f"Prediction {tuple(prediction.shape)} and target {tuple(target.shape)} differ in shape"
        )
    rows = prediction.shape[-2]
    if rows % 2 or objective.rgb_weight == objective.alpha_weight:
        return torch.mean((prediction - target) ** 2)
    half = rows // 2
    total = objective.rgb_weight + objective.alpha_weight
    rgb = torch.mean((prediction[..., :half, :] - target[..., :half, :]) ** 2)
    alpha = torch.mean((prediction[..., half:, :] - target[..., half:, :]) ** 2)
    return (objective.rgb_weight * rgb + objective.alpha_weight * alpha) / total


def compute_loss(
    model: Callable,
    batch: TokenBatch,
    objective: Objective,
    mode: MaskMode = MaskMode.TEXT_TO_ALPHA_BLOCKED,
    design: JointDesign = JointDesign.SEQUENCE_EXTENSION,
    generator: Optional[torch.Generator] = None,
    noise: Optional[Tensor] = None,
    t: Optional[Tensor] = None,
) -> Tensor:
    """
    Objective loss on one batch.

    ``noise`` and ``t`` are drawn from ``generator`` unless given. Flow
    matching regresses the velocity; DDPM regresses the injected noise.
    """
    if len(batch) == 0:
        raise ContractError("Training batch is empty")
    data = batch.tokens
    size = data.shape[0]
    if noise is None:
        noise = torch.randn(data.shape, dtype=DTYPE, generator=generator)

    if objective.kind is ObjectiveKind.FLOW_MATCHING:
        if t is None:
            t = torch.rand(size, dtype=DTYPE, generator=generator)
        x_t, target = fm_interpolate(noise, data, t)
        model_time = torch.as_tensor(t, dtype=DTYPE)
    else:
        schedule = objective.schedule()
        if t is None:
            t = torch.randint(1, schedule.timesteps + 1, (size,), generator=generator)
        x_t = ddpm_q_sample(data, t, noise, schedule)
        target = noise
        model_time = torch.as_tensor(t, dtype=DTYPE) / schedule.timesteps

    prediction = model(x_t, model_time, batch.cond_ids, mode=mode, design=design)
    return half_weighted_mse(prediction, target, objective)


def training_step(
    model: Callable,
    batch: TokenBatch,
    objective: Objective,
    mode: MaskMode = MaskMode.TEXT_TO_ALPHA_BLOCKED,
    design: JointDesign = JointDesign.SEQUENCE_EXTENSION,
    optimizer: Optional[torch.optim.Optimizer] = None,
    generator: Optional[torch.Generator] = None,
    noise: Optional[Tensor] = None,
    t: Optional[Tensor] = None,
) -> float:
    """
    One optimisation step over the trainable set.

    Returns:
        The pre-step loss value
    """
    loss = compute_loss(model, batch, objective, mode, design, generator, noise, t)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f"Loss became non-finite ({value})")

    if optimizer is not None and loss.requires_grad:
        optimizer.zero_grad(set_to_none=True)
        backward(loss)
        optimizer.step()
    return value


@torch.no_grad()
def sample_tokens(
    model: Callable,
    cond_id: int,
    sampler: SamplerConfig,
    rows: int,
    patch_dim: int,
    mode: MaskMode = MaskMode.TEXT_TO_ALPHA_BLOCKED,
    design: JointDesign = JointDesign.SEQUENCE_EXTENSION,
) -> Tensor:
    """
    Integrate from seeded noise to data tokens.

    Returns:
        Tensor [1, rows, patch_dim]
    """
    generator = torch.Generator().manual_seed(sampler.seed)
    x = torch.randn(1, rows, patch_dim, dtype=DTYPE, generator=generator)
    cond = torch.tensor([cond_id], dtype=torch.int64)
    objective = sampler.objective

    if objective.kind is ObjectiveKind.FLOW_MATCHING:
        dt = 1.0 / sampler.steps
        for step in range(sampler.steps):
            t = torch.full((1,), step * dt, dtype=DTYPE)
            x = x + dt * model(x, t, cond, mode=mode, design=design)
        return x

    schedule = objective.schedule()
    timesteps = schedule.respaced(sampler.steps)
    for position, step in enumerate(timesteps.tolist()):
        alpha_bar = schedule.alpha_bar(step)
        is_last = position == len(timesteps) - 1
        alpha_bar_prev = (
            torch.tensor(1.0, dtype=DTYPE) if is_last else schedule.alpha_bar(int(timesteps[position + 1]))
        )
        beta = 1.0 - alpha_bar / alpha_bar_prev

        eps = model(x, torch.full((1,), step / schedule.timesteps, dtype=DTYPE), cond, mode=mode, design=design)
        mean = (x - beta / torch.sqrt(1.0 - alpha_bar) * eps) / torch.sqrt(1.0 - beta)
        if is_last:
            x = mean
        else:
            variance = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
            x = mean + torch.sqrt(variance) * torch.randn(x.shape, dtype=DTYPE, generator=generator)
    return x


def sample(
    model,
    cond_id: int,
    sampler: SamplerConfig,
    mode: MaskMode = MaskMode.TEXT_TO_ALPHA_BLOCKED,
    design: JointDesign = JointDesign.SEQUENCE_EXTENSION,
    doubled: bool = True,
) -> np.ndarray:
    """
    Generate one video for ``cond_id``.

    Returns:
        RGBA video [F, H, W, 4] in [0, 1] when ``doubled``, else RGB [F, H, W, 3]
    """
    config = model.config
    was_training = model.training
    model.eval()
    try:
        rows = 2 * config.video_len if doubled else config.video_len
        tokens = sample_tokens(model, cond_id, sampler, rows, config.patch_dim, mode, design)[0]
    finally:
        model.train(was_training)

    geometry = (config.frames, config.height, config.width, config.patch)
    if doubled:
        return tokens_to_rgba(tokens.numpy(), *geometry)
    return tokens_to_rgb(tokens.numpy(), *geometry)
