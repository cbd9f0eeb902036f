"""
Dense float64 tensor arithmetic on top of torch autograd.

Every other model module builds on these helpers: shape-checked products, the
exclusion-based masked softmax used by grouped attention, layer norm, the
scalar-loss backward contract and the central-difference gradient oracle.
"""
import random
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from src.utils.config import settings
from src.utils.exceptions import (
    ContractError,
    DegenerateRowError,
    NonFiniteError,
    OracleInvalidError,
    ShapeError,
)
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

DTYPE = torch.float64
NEG_INF = float("-inf")


def as_tensor(data, requires_grad: bool = False) -> Tensor:
    """Build a float64 tensor from array-like data."""
    tensor = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE).clone()
    tensor.requires_grad_(requires_grad)
    return tensor


def seed_everything(seed: int) -> torch.Generator:
    """
    Seed torch, numpy and ``random`` and pin torch to deterministic kernels.

    Args:
        seed: Seed shared by every generator

    Returns:
        A dedicated torch generator seeded with ``seed``
    """
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(settings.torch_threads)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def ensure_finite(tensor: Tensor, what: str = "tensor") -> Tensor:
    """Raise ``NonFiniteError`` if ``tensor`` holds NaN or Inf."""
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(f"{what} contains non-finite values")
    return tensor


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product with an explicit dimension check.

    Leading batch dimensions broadcast as in ``torch.matmul``.

    Args:
        a: Tensor [..., m, k]
        b: Tensor [..., k, n]

    Returns:
        Tensor [..., m, n]
    """
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"Inner dimensions disagree: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    return torch.matmul(a, b)


def softmax_masked(logits: Tensor, additive_mask: Tensor) -> Tensor:
    """
    Row softmax of ``logits + additive_mask`` computed by exclusion.

    Masked entries (``-inf`` in the mask) never enter the exponentials or the
    row sums, so their weight is exactly 0 and their gradient is exactly 0.

    Args:
        logits: Tensor [..., rows, cols]
        additive_mask: Tensor [rows, cols] (or broadcastable) holding 0 or -inf

    Returns:
        Tensor of row-stochastic weights, same shape as ``logits``
    """
    if additive_mask.shape[-2:] != logits.shape[-2:]:
        raise ShapeError(
            f"Mask shape {tuple(additive_mask.shape)} does not match logits {tuple(logits.shape)}"
        )

    keep = additive_mask == 0
    blocked = torch.isneginf(additive_mask)
    if not torch.all(keep | blocked):
        raise ContractError("Additive mask entries must be 0 or -inf")
    if not torch.all(keep.any(dim=-1)):
        raise DegenerateRowError("Attention mask has a fully masked row")

    keep = keep.expand_as(logits)
    row_max = logits.detach().masked_fill(~keep, NEG_INF).amax(dim=-1, keepdim=True)
    shifted = torch.where(keep, logits - row_max, torch.zeros_like(logits))
    weights = torch.where(keep, torch.exp(shifted), torch.zeros_like(logits))
    return weights / weights.sum(dim=-1, keepdim=True)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Per-row layer normalisation followed by the affine map.

    Args:
        x: Tensor [..., D]
        scale: Parameter [D]
        shift: Parameter [D]
        eps: Variance floor

    Returns:
        Normalised tensor, same shape as ``x``
    """
    dim = x.shape[-1]
    if dim < 1 or scale.shape != (dim,) or shift.shape != (dim,):
        raise ShapeError(
            f"layer_norm expects scale/shift of shape ({dim},), "
            f"got {tuple(scale.shape)} and {tuple(shift.shape)}"
        )
    return F.layer_norm(x, (dim,), weight=scale, bias=shift, eps=eps)


def backward(loss: Tensor) -> None:
    """
    Populate ``.grad`` of every trainable parameter reachable from ``loss``.

    Parameters with ``requires_grad=False`` are never touched.
    """
    if loss.dim() != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("Loss is not connected to any trainable parameter")
    ensure_finite(loss.detach(), "loss")
    loss.backward()


def freeze(module: nn.Module) -> nn.Module:
    """Mark every parameter of ``module`` as non-trainable."""
    for param in module.parameters():
        param.requires_grad_(False)
    return module


def trainable_parameters(module: nn.Module) -> List[nn.Parameter]:
    """Parameters of ``module`` that receive gradients."""
    return [p for p in module.parameters() if p.requires_grad]


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[nn.Parameter],
    eps: float = 1e-6,
    coordinates: Optional[Iterable[int]] = None,
) -> float:
    """
    Compare autograd gradients against central differences.

    Args:
        f: Closure evaluating the scalar objective from the current parameter values
        params: Parameters to check (all coordinates unless ``coordinates`` is given)
        eps: Perturbation size in (0, 1e-3]
        coordinates: Optional flat indices checked in every parameter

    Returns:
        Worst relative error, with denominator max(|analytic|, |numeric|, 1e-8)
    """
    if not 0.0 < eps <= 1e-3:
        raise ContractError(f"eps must lie in (0, 1e-3], got {eps}")

    for param in params:
        param.grad = None

    loss = f()
    with torch.no_grad():
        repeat = f()
    if loss.item() != repeat.item():
        raise OracleInvalidError(
            f"Objective is not deterministic: {loss.item()!r} != {repeat.item()!r}"
        )
    backward(loss)

    worst = 0.0
    with torch.no_grad():
        for param in params:
            analytic = param.grad.reshape(-1) if param.grad is not None else torch.zeros(param.numel(), dtype=DTYPE)
            flat = param.view(-1)
            indices = range(param.numel()) if coordinates is None else coordinates
            for index in indices:
                original = flat[index].item()
                flat[index] = original + eps
                plus = f().item()
                flat[index] = original - eps
                minus = f().item()
                flat[index] = original

                numeric = (plus - minus) / (2.0 * eps)
                exact = analytic[index].item()
                denom = max(abs(exact), abs(numeric), 1e-8)
                worst = max(worst, abs(exact - numeric) / denom)

    logger.debug(f"Finite-difference check over {len(params)} parameters: max rel err {worst:.3e}")
    return worst
