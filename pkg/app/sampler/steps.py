"""Single Euler updates for the discrete and continuous modalities."""
import math
from typing import Callable

import torch

from ..errors import RangeError, ShapeError, TimeOutOfRange


def _check_time(t: float, dt: float):
    if not 0.0 <= t < 1.0:
        raise TimeOutOfRange(f"Step time must lie in [0, 1), got {t}")
    if dt <= 0:
        raise RangeError(f"dt must be positive, got {dt}")


def transition_probs(a_t: torch.Tensor, probs: torch.Tensor, t: float, dt: float) -> torch.Tensor:
    """Next-type distribution p_next = 1[a_t = j] + (dt/(1−t))·probs, with the
    current type's rate set so each row sums to one.

    Rows are clamped to [0, 1] and renormalized when the rate overshoots.
    """
    _check_time(t, dt)
    if probs.ndim != 2 or a_t.shape != probs.shape[:1]:
        raise ShapeError(f"probs {tuple(probs.shape)} do not match atom types {tuple(a_t.shape)}")
    probs = probs.to(torch.float64)
    rates = (dt / (1.0 - t)) * probs
    index = a_t.long().unsqueeze(-1)
    current = rates.gather(-1, index)
    stay = -(rates.sum(dim=-1, keepdim=True) - current)
    rates = rates.scatter(-1, index, stay)
    p_next = torch.zeros_like(rates).scatter(-1, index, 1.0) + rates
    if bool(((p_next < 0) | (p_next > 1)).any()):
        p_next = p_next.clamp(0.0, 1.0)
        p_next = p_next / p_next.sum(dim=-1, keepdim=True)
    return p_next


def discrete_flow_step(a_t: torch.Tensor, probs: torch.Tensor, t: float, dt: float,
                       generator: torch.Generator) -> torch.Tensor:
    p_next = transition_probs(a_t, probs, t, dt)
    return torch.multinomial(p_next, 1, generator=generator).squeeze(-1)


def euclidean_step(z_t: torch.Tensor, z_pred: torch.Tensor, t: float, dt: float, gamma: float,
                   g_fn: Callable[[float], float], generator: torch.Generator) -> torch.Tensor:
    """z + (v + s + noise)·dt with v = (z' − z)/(1−t) and s = g(t)(t·v − z)/(1−t)"""
    _check_time(t, dt)
    if z_t.shape != z_pred.shape:
        raise ShapeError(f"State {tuple(z_t.shape)} and prediction {tuple(z_pred.shape)} differ")
    g = g_fn(t)
    velocity = (z_pred - z_t) / (1.0 - t)
    score = g * (t * velocity - z_t) / (1.0 - t)
    increment = velocity + score
    scale = math.sqrt(2.0 * gamma * g) if gamma > 0 and g > 0 else 0.0
    if scale > 0:
        increment = increment + scale * torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
    return z_t + increment * dt
