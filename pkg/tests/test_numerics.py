"""
Tests for the float64 tensor helpers and the gradient oracle.
"""
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from src.models.numerics import (
    DTYPE,
    NEG_INF,
    as_tensor,
    backward,
    finite_diff_check,
    freeze,
    layer_norm,
    matmul,
    softmax_masked,
    trainable_parameters,
)
from src.utils.exceptions import (
    ContractError,
    DegenerateRowError,
    OracleInvalidError,
    ShapeError,
)


def test_matmul_identity_and_hand_arithmetic():
    """Identity leaves A unchanged; a 2x2 by 2x1 product matches hand arithmetic."""
    a = as_tensor(np.arange(9.0).reshape(3, 3))
    assert torch.equal(matmul(torch.eye(3, dtype=DTYPE), a), a)

    result = matmul(as_tensor([[1, 2], [3, 4]]), as_tensor([[1], [1]]))
    assert torch.equal(result, as_tensor([[3], [7]]))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(torch.ones(2, 3, dtype=DTYPE), torch.ones(2, 3, dtype=DTYPE))


def test_matmul_gradient_of_sum():
    """d sum(a @ b) / da = ones @ b^T."""
    gen = torch.Generator().manual_seed(0)
    a = nn.Parameter(torch.randn(5, 4, dtype=DTYPE, generator=gen))
    b = torch.randn(4, 6, dtype=DTYPE, generator=gen)

    backward(matmul(a, b).sum())

    expected = torch.ones(5, 6, dtype=DTYPE) @ b.T
    assert torch.allclose(a.grad, expected, atol=1e-12)
    assert finite_diff_check(lambda: matmul(a, b).sum(), [a]) <= 1e-6


def test_matmul_associativity():
    gen = torch.Generator().manual_seed(3)
    a, b, c = (torch.randn(6, 6, dtype=DTYPE, generator=gen) for _ in range(3))
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    assert torch.max(torch.abs(left - right)) / torch.max(torch.abs(left)) <= 1e-10


def test_softmax_masked_examples():
    """Uniform rows, exclusion of masked entries and agreement with direct evaluation."""
    uniform = softmax_masked(torch.zeros(1, 4, dtype=DTYPE), torch.zeros(1, 4, dtype=DTYPE))
    assert torch.allclose(uniform, torch.full((1, 4), 0.25, dtype=DTYPE), atol=1e-15)

    masked = softmax_masked(torch.zeros(1, 3, dtype=DTYPE), as_tensor([[0, 0, NEG_INF]]))
    assert masked[0, 2].item() == 0.0
    assert masked[0, 0].item() == pytest.approx(0.5, abs=1e-15)

    logits = as_tensor([[1, 2, 3]])
    direct = [math.exp(v) / sum(math.exp(u) for u in (1, 2, 3)) for v in (1, 2, 3)]
    assert np.allclose(softmax_masked(logits, torch.zeros(1, 3, dtype=DTYPE)).numpy()[0], direct, atol=1e-15)


def test_softmax_masked_fully_masked_row():
    mask = as_tensor([[0, 0], [NEG_INF, NEG_INF]])
    with pytest.raises(DegenerateRowError):
        softmax_masked(torch.zeros(2, 2, dtype=DTYPE), mask)


def test_softmax_masked_rejects_finite_penalties():
    with pytest.raises(ContractError):
        softmax_masked(torch.zeros(1, 2, dtype=DTYPE), as_tensor([[0, -1e9]]))


@settings(max_examples=50, deadline=None)
@given(
    rows=st.integers(1, 6),
    cols=st.integers(1, 8),
    seed=st.integers(0, 10_000),
)
def test_softmax_masked_rows_sum_to_one(rows, cols, seed):
    """Rows sum to 1 within 1e-12 and blocked entries are exactly zero."""
    gen = torch.Generator().manual_seed(seed)
    logits = torch.randn(rows, cols, dtype=DTYPE, generator=gen) * 10
    blocked = torch.rand(rows, cols, generator=gen) < 0.4
    blocked[:, 0] = False
    mask = torch.zeros(rows, cols, dtype=DTYPE).masked_fill(blocked, NEG_INF)

    weights = softmax_masked(logits, mask)

    assert torch.all(torch.abs(weights.sum(dim=-1) - 1.0) <= 1e-12)
    assert torch.all(weights[blocked] == 0.0)


def test_softmax_masked_gradient_fidelity():
    gen = torch.Generator().manual_seed(1)
    logits = nn.Parameter(torch.randn(3, 5, dtype=DTYPE, generator=gen))
    mask = torch.zeros(3, 5, dtype=DTYPE)
    mask[0, 3:] = NEG_INF
    target = torch.randn(3, 5, dtype=DTYPE, generator=gen)

    error = finite_diff_check(lambda: (softmax_masked(logits, mask) * target).sum(), [logits])
    assert error <= 1e-6


def test_layer_norm_examples():
    scale, shift = torch.ones(2, dtype=DTYPE), torch.zeros(2, dtype=DTYPE)
    constant = layer_norm(torch.full((1, 2), 3.0, dtype=DTYPE), scale, shift)
    assert torch.equal(constant, torch.zeros(1, 2, dtype=DTYPE))

    normalised = layer_norm(as_tensor([[1, -1]]), scale, shift, eps=1e-14)
    assert torch.allclose(normalised, as_tensor([[1, -1]]), atol=1e-12)


def test_layer_norm_gradient_fidelity():
    gen = torch.Generator().manual_seed(2)
    x = nn.Parameter(torch.randn(4, 6, dtype=DTYPE, generator=gen))
    scale = nn.Parameter(torch.rand(6, dtype=DTYPE, generator=gen) + 0.5)
    shift = nn.Parameter(torch.randn(6, dtype=DTYPE, generator=gen))
    weights = torch.randn(4, 6, dtype=DTYPE, generator=gen)

    error = finite_diff_check(lambda: (layer_norm(x, scale, shift) * weights).sum(), [x, scale, shift])
    assert error <= 1e-5


def test_layer_norm_shape_check():
    with pytest.raises(ShapeError):
        layer_norm(torch.ones(2, 3, dtype=DTYPE), torch.ones(2, dtype=DTYPE), torch.zeros(3, dtype=DTYPE))


def test_backward_examples():
    """sum(p) gives ones; sum(p^2)/2 gives p; frozen parameters stay untouched."""
    p = nn.Parameter(as_tensor([1.0, -2.0, 3.0]))
    backward(p.sum())
    assert torch.equal(p.grad, torch.ones(3, dtype=DTYPE))

    q = nn.Parameter(as_tensor([0.5, -1.5]))
    frozen = nn.Parameter(as_tensor([2.0, 2.0]), requires_grad=False)
    backward((q * q).sum() / 2 + (q * frozen).sum() * 0)
    assert torch.equal(q.grad, q.detach())
    assert frozen.grad is None


def test_backward_requires_scalar():
    p = nn.Parameter(torch.ones(3, dtype=DTYPE))
    with pytest.raises(ContractError):
        backward(p * 2)


def test_freeze_and_trainable_parameters():
    module = nn.Linear(3, 2, dtype=DTYPE)
    assert len(trainable_parameters(module)) == 2
    freeze(module)
    assert trainable_parameters(module) == []


def test_finite_diff_check_quadratic():
    p = nn.Parameter(as_tensor([0.3, -1.2, 2.0]))
    assert finite_diff_check(lambda: (p * p).sum() + 3 * p.sum(), [p]) <= 1e-9


def test_finite_diff_check_rejects_nondeterministic():
    p = nn.Parameter(as_tensor([1.0]))
    calls = {"n": 0}

    def noisy():
        calls["n"] += 1
        return (p * p).sum() + calls["n"]

    with pytest.raises(OracleInvalidError):
        finite_diff_check(noisy, [p])


def test_finite_diff_check_eps_range():
    p = nn.Parameter(as_tensor([1.0]))
    with pytest.raises(ContractError):
        finite_diff_check(lambda: p.sum(), [p], eps=1e-2)
