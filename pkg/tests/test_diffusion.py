"""
Tests for the objectives, schedules, the training step and the samplers.
"""
import math

import numpy as np
import pytest
import torch

from src.models.attention import MaskMode
from src.models.diffusion import (
    DDPMSchedule,
    Objective,
    ObjectiveKind,
    SamplerConfig,
    TokenBatch,
    compute_loss,
    ddpm_q_sample,
    fm_interpolate,
    half_weighted_mse,
    sample,
    sample_tokens,
    training_step,
)
from src.models.numerics import DTYPE
from src.models.training import make_optimizer
from src.utils.exceptions import ConfigurationError, ContractError, TrainingError, UnknownConditionError

GEN_SEED = 11


def _tokens(*shape, seed=GEN_SEED):
    return torch.randn(*shape, dtype=DTYPE, generator=torch.Generator().manual_seed(seed))


class ConstantModel:
    """Stub denoiser returning a fixed tensor (or ``fn(x)``)."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = []

    def __call__(self, x, t, cond_ids, mode=None, design=None):
        self.calls.append(torch.as_tensor(t).clone())
        return self.fn(x)


def test_fm_interpolate_endpoints():
    x0, x1 = _tokens(2, 5, 3, seed=1), _tokens(2, 5, 3, seed=2)

    start, velocity = fm_interpolate(x0, x1, 0.0)
    end, _ = fm_interpolate(x0, x1, 1.0)
    mid, _ = fm_interpolate(x0, x1, torch.tensor([0.5, 0.25], dtype=DTYPE))

    assert torch.equal(start, x0)
    assert torch.equal(end, x1)
    assert torch.equal(velocity, x1 - x0)
    assert torch.allclose(mid[0], 0.5 * (x0[0] + x1[0]), atol=1e-15)
    assert torch.allclose(mid[1], 0.75 * x0[1] + 0.25 * x1[1], atol=1e-15)


def test_fm_interpolate_contract():
    x = _tokens(1, 4, 3)
    with pytest.raises(ContractError):
        fm_interpolate(x, x[:, :2], 0.5)
    with pytest.raises(ContractError):
        fm_interpolate(x, x, 1.5)
    with pytest.raises(ContractError):
        fm_interpolate(x, x, float("nan"))


def test_schedule_is_monotone_and_ends_near_zero():
    schedule = DDPMSchedule()
    bars = schedule.alpha_bars
    assert torch.all(bars[1:] < bars[:-1])
    assert schedule.alpha_bar(1).item() == pytest.approx(1 - 1e-4, abs=1e-15)
    assert schedule.alpha_bar(1000).item() < 0.01


@pytest.mark.parametrize("t", [0, 1001])
def test_schedule_rejects_out_of_range_steps(t):
    with pytest.raises(ContractError):
        DDPMSchedule().alpha_bar(t)


def test_respaced_timesteps():
    schedule = DDPMSchedule()
    grid = schedule.respaced(50)
    assert grid[0].item() == 1000 and grid[-1].item() == 1
    assert len(grid) == 50
    assert torch.all(grid[1:] < grid[:-1])
    assert schedule.respaced(1).tolist() == [1000]
    with pytest.raises(ConfigurationError):
        schedule.respaced(0)


def test_ddpm_q_sample_limits():
    x0, noise = _tokens(3, 4, seed=3), _tokens(3, 4, seed=4)
    early = ddpm_q_sample(x0, 1, noise)
    assert torch.allclose(early, x0, atol=0.05)

    late = ddpm_q_sample(x0, 1000, noise)
    assert torch.max(torch.abs(late - noise)) < 0.05


def test_ddpm_q_sample_variance():
    """With x0 = 0 the marginal variance is 1 - alpha_bar."""
    schedule = DDPMSchedule()
    noise = _tokens(200_000, seed=5)
    for t in (10, 300, 900):
        samples = ddpm_q_sample(torch.zeros_like(noise), t, noise, schedule)
        expected = 1.0 - schedule.alpha_bar(t).item()
        assert samples.var().item() == pytest.approx(expected, rel=0.02)


def test_objective_validation():
    with pytest.raises(ValueError):
        Objective(beta_start=0.02, beta_end=0.01)
    with pytest.raises(ValueError):
        Objective(rgb_weight=0.0, alpha_weight=0.0)


def test_half_weighted_mse():
    target = torch.zeros(1, 4, 2, dtype=DTYPE)
    prediction = torch.zeros(1, 4, 2, dtype=DTYPE)
    prediction[:, 2:] = 1.0

    assert half_weighted_mse(prediction, target, Objective()).item() == pytest.approx(0.5)
    rgb_only = Objective(rgb_weight=1.0, alpha_weight=0.0)
    assert half_weighted_mse(prediction, target, rgb_only).item() == 0.0
    alpha_heavy = Objective(rgb_weight=1.0, alpha_weight=3.0)
    assert half_weighted_mse(prediction, target, alpha_heavy).item() == pytest.approx(0.75)
    with pytest.raises(ContractError):
        half_weighted_mse(prediction, target[:, :2], Objective())


def test_flow_matching_loss_with_stub_models():
    data, noise = _tokens(2, 6, 3, seed=6), _tokens(2, 6, 3, seed=7)
    batch = TokenBatch(tokens=data, cond_ids=torch.tensor([0, 1]))
    t = torch.tensor([0.2, 0.9], dtype=DTYPE)

    perfect = ConstantModel(lambda x: data - noise)
    assert compute_loss(perfect, batch, Objective(), noise=noise, t=t).item() == pytest.approx(0.0, abs=1e-15)

    zero = ConstantModel(lambda x: torch.zeros_like(x))
    expected = torch.mean((data - noise) ** 2).item()
    assert compute_loss(zero, batch, Objective(), noise=noise, t=t).item() == pytest.approx(expected, rel=1e-12)
    assert torch.equal(zero.calls[0], t)


def test_ddpm_loss_with_stub_models():
    data, noise = _tokens(2, 6, 3, seed=8), _tokens(2, 6, 3, seed=9)
    batch = TokenBatch(tokens=data, cond_ids=torch.tensor([2, 3]))
    objective = Objective(kind=ObjectiveKind.DDPM)
    t = torch.tensor([1, 500])

    perfect = ConstantModel(lambda x: noise)
    assert compute_loss(perfect, batch, objective, noise=noise, t=t).item() == 0.0
    assert torch.allclose(perfect.calls[0], torch.tensor([0.001, 0.5], dtype=DTYPE))

    zero = ConstantModel(lambda x: torch.zeros_like(x))
    expected = torch.mean(noise**2).item()
    assert compute_loss(zero, batch, objective, noise=noise, t=t).item() == pytest.approx(expected, rel=1e-12)


def test_compute_loss_rejects_empty_batch():
    batch = TokenBatch(tokens=torch.zeros(0, 4, 3, dtype=DTYPE), cond_ids=torch.zeros(0, dtype=torch.int64))
    with pytest.raises(ContractError):
        compute_loss(ConstantModel(lambda x: x), batch, Objective())


def test_training_step_decreases_loss(tiny_model, tiny_config):
    """A small step along the gradient lowers the loss at fixed noise and time."""
    gen = torch.Generator().manual_seed(21)
    data = torch.rand(2, tiny_config.video_len, tiny_config.patch_dim, dtype=DTYPE, generator=gen) * 2 - 1
    batch = TokenBatch(tokens=data, cond_ids=torch.tensor([4, 5]))
    noise = torch.randn(data.shape, dtype=DTYPE, generator=gen)
    t = torch.tensor([0.3, 0.7], dtype=DTYPE)
    optimizer = make_optimizer(tiny_model.parameters(), lr=1e-6)

    before = training_step(
        tiny_model, batch, Objective(), MaskMode.UNMASKED, optimizer=optimizer, noise=noise, t=t
    )
    with torch.no_grad():
        after = compute_loss(tiny_model, batch, Objective(), MaskMode.UNMASKED, noise=noise, t=t).item()

    assert after < before


def test_training_step_without_optimizer_leaves_model(tiny_model, tiny_config):
    data = _tokens(1, tiny_config.video_len, tiny_config.patch_dim)
    batch = TokenBatch(tokens=data, cond_ids=torch.tensor([0]))
    snapshot = [p.detach().clone() for p in tiny_model.parameters()]

    value = training_step(tiny_model, batch, Objective(), MaskMode.UNMASKED, generator=torch.Generator())

    assert math.isfinite(value)
    assert all(torch.equal(a, b) for a, b in zip(snapshot, tiny_model.parameters()))


def test_training_step_reports_divergence():
    batch = TokenBatch(tokens=_tokens(1, 4, 3), cond_ids=torch.tensor([0]))
    diverged = ConstantModel(lambda x: torch.full_like(x, float("nan")))
    with pytest.raises(TrainingError):
        training_step(diverged, batch, Objective(), generator=torch.Generator())


def _zero_output_layer(model):
    with torch.no_grad():
        model.unpatch.weight.zero_()
        model.unpatch.bias.zero_()


def test_flow_matching_step_golden_values(tiny_model, tiny_config):
    """A zeroed output layer predicts 0, so loss and first RMSprop bias update are known exactly."""
    _zero_output_layer(tiny_model)
    shape = (2, tiny_config.video_len, tiny_config.patch_dim)
    batch = TokenBatch(tokens=torch.full(shape, 0.5, dtype=DTYPE), cond_ids=torch.tensor([3, 9]))
    noise = torch.full(shape, -0.5, dtype=DTYPE)
    optimizer = make_optimizer(tiny_model.parameters(), lr=1e-3, rms_alpha=0.99)

    loss = training_step(
        tiny_model, batch, Objective(), MaskMode.UNMASKED,
        optimizer=optimizer, generator=torch.Generator().manual_seed(GEN_SEED), noise=noise,
    )

    # velocity target is 1 everywhere
    assert loss == 1.0
    grad = -2.0 / tiny_config.patch_dim
    update = 1e-3 * grad / (math.sqrt(1.0 - 0.99) * abs(grad) + 1e-8)
    expected = torch.full((tiny_config.patch_dim,), -update, dtype=DTYPE)
    assert torch.allclose(tiny_model.unpatch.bias, expected, rtol=0, atol=1e-14)
    assert abs(expected[0].item() - 0.0099999940) < 1e-10


def test_ddpm_step_golden_loss(tiny_model, tiny_config):
    _zero_output_layer(tiny_model)
    data = _tokens(2, tiny_config.video_len, tiny_config.patch_dim)
    batch = TokenBatch(tokens=data, cond_ids=torch.tensor([0, 15]))
    noise = torch.full(data.shape, 0.5, dtype=DTYPE)

    loss = training_step(
        tiny_model, batch, Objective(kind=ObjectiveKind.DDPM), MaskMode.UNMASKED,
        generator=torch.Generator().manual_seed(GEN_SEED), noise=noise,
    )

    assert loss == 0.25


def test_single_euler_step():
    """With one step the sampler returns noise + model(noise, t=0)."""
    offset = torch.full((1, 4, 3), 0.25, dtype=DTYPE)
    stub = ConstantModel(lambda x: offset)
    sampler = SamplerConfig(steps=1, seed=9)

    result = sample_tokens(stub, 0, sampler, rows=4, patch_dim=3)

    noise = torch.randn(1, 4, 3, dtype=DTYPE, generator=torch.Generator().manual_seed(9))
    assert torch.equal(result, noise + offset)
    assert stub.calls[0].tolist() == [0.0]


def test_euler_times_cover_unit_interval():
    stub = ConstantModel(lambda x: torch.zeros_like(x))
    sample_tokens(stub, 0, SamplerConfig(steps=4), rows=2, patch_dim=3)
    assert [c.item() for c in stub.calls] == [0.0, 0.25, 0.5, 0.75]


def test_ddpm_sampler_with_oracle_noise():
    """A denoiser that knows the injected noise maps x_T back to the data in one step."""
    objective = Objective(kind=ObjectiveKind.DDPM)
    sampler = SamplerConfig(steps=1, seed=3, objective=objective)
    x_t = torch.randn(1, 2, 3, dtype=DTYPE, generator=torch.Generator().manual_seed(3))
    data = torch.linspace(-1, 1, 6, dtype=DTYPE).reshape(1, 2, 3)
    alpha_bar = DDPMSchedule().alpha_bar(1000)
    eps = (x_t - torch.sqrt(alpha_bar) * data) / torch.sqrt(1 - alpha_bar)

    result = sample_tokens(ConstantModel(lambda x: eps), 0, sampler, rows=2, patch_dim=3)

    assert torch.allclose(result, data, atol=1e-9)


def test_sample_is_deterministic(tiny_model, tiny_config):
    sampler = SamplerConfig(steps=2, seed=7)
    tiny_model.attach_design("sequence_extension")

    first = sample(tiny_model, 3, sampler)
    second = sample(tiny_model, 3, sampler)

    assert first.shape == (tiny_config.frames, tiny_config.height, tiny_config.width, 4)
    assert np.array_equal(first, second)
    assert first.min() >= 0.0 and first.max() <= 1.0


def test_sample_rgb_only(tiny_model, tiny_config):
    video = sample(tiny_model, 1, SamplerConfig(steps=1), mode=MaskMode.UNMASKED, doubled=False)
    assert video.shape == (tiny_config.frames, tiny_config.height, tiny_config.width, 3)


def test_sample_unknown_condition(tiny_model):
    with pytest.raises(UnknownConditionError):
        sample(tiny_model, 99, SamplerConfig(steps=1))
