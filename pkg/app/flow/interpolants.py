"""Noising paths shared by training and finetuning.

All draws take an explicit ``torch.Generator``; nothing here touches the
global RNG.
"""
from typing import Optional, Sequence, Union

import torch

from ..errors import RangeError, ShapeError

MAX_LOSS_WEIGHT = 100.0

TimeLike = Union[float, torch.Tensor]


def sample_time(generator: torch.Generator, alpha_t: float = 1.8,
                size: Optional[Sequence[int]] = None, dtype=torch.float64) -> TimeLike:
    """Draw t ~ Beta(alpha_t, 1) as U^(1/alpha_t).

    Returns a python float when ``size`` is None, a tensor otherwise.
    """
    if alpha_t <= 0:
        raise RangeError(f"alpha_t must be positive, got {alpha_t}")
    shape = tuple(size) if size is not None else (1,)
    u = torch.rand(shape, generator=generator, dtype=dtype)
    t = u.pow(1.0 / alpha_t)
    return float(t.item()) if size is None else t


def interpolate_continuous(x1: torch.Tensor, eps: torch.Tensor, t: TimeLike) -> torch.Tensor:
    """t·x1 + (1−t)·eps; ``t`` may be a scalar or broadcastable tensor"""
    if x1.shape != eps.shape:
        raise ShapeError(f"Endpoint shape {tuple(x1.shape)} does not match noise shape {tuple(eps.shape)}")
    return t * x1 + (1 - t) * eps


def interpolate_discrete(a: torch.Tensor, t: float, num_types: int,
                         generator: torch.Generator) -> torch.Tensor:
    """Keep each type with probability t, otherwise resample it uniformly.

    The resample can land on the true type, so P(true) = t + (1−t)/K.
    """
    if num_types < 2:
        raise RangeError(f"Need at least two atom types, got {num_types}")
    a = torch.as_tensor(a, dtype=torch.long)
    if a.numel() and (int(a.min()) < 0 or int(a.max()) >= num_types):
        raise RangeError(f"Atom types must lie in [0, {num_types})")
    keep = torch.rand(a.shape, generator=generator, dtype=torch.float64) < t
    uniform = torch.randint(0, num_types, a.shape, generator=generator)
    return torch.where(keep, a, uniform)


def loss_weight(t: TimeLike) -> TimeLike:
    """β(t) = min(100, (1−t)^−2), equal to 100 at t = 1"""
    if isinstance(t, torch.Tensor):
        # 0^-2 is inf, which the cap turns into 100
        return (1 - t).clamp_min(0.0).pow(-2).clamp_max(MAX_LOSS_WEIGHT)
    t = float(t)
    if t < 0.0 or t > 1.0:
        raise RangeError(f"t must lie in [0, 1], got {t}")
    if t >= 1.0:
        return MAX_LOSS_WEIGHT
    return min(MAX_LOSS_WEIGHT, 1.0 / (1.0 - t) ** 2)
