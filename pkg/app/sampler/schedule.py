from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from ..core import DomainClass
from ..errors import RangeError

DEFAULT_GAMMA = 0.01
SMALL_MOLECULE_CART_GAMMA = 50.0
G_MODES = ("inverse", "zero")


def default_gamma() -> Dict[str, float]:
    return {"cart": DEFAULT_GAMMA, "frac": DEFAULT_GAMMA, "lengths": DEFAULT_GAMMA, "angles": DEFAULT_GAMMA}


@dataclass(frozen=True)
class SampleSchedule:
    """Integration grid and churn settings.

    ``g_mode`` "inverse" uses g(t) = 1/(t + g_eps); "zero" switches the
    score and noise terms off.
    """
    num_steps: int = 100
    gamma: Dict[str, float] = field(default_factory=default_gamma)
    g_mode: str = "inverse"
    g_eps: float = 0.01
    seed: int = 0
    grid: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.num_steps < 1:
            raise RangeError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.g_mode not in G_MODES:
            raise RangeError(f"g_mode must be one of {G_MODES}, got {self.g_mode!r}")
        for name, value in self.gamma.items():
            if value < 0:
                raise RangeError(f"gamma[{name}] must be >= 0, got {value}")
        if self.grid is not None:
            grid = np.asarray(self.grid, dtype=np.float64)
            if grid.shape != (self.num_steps + 1,):
                raise RangeError(f"Time grid needs {self.num_steps + 1} points, got {grid.shape[0]}")
            if grid[0] != 0.0 or grid[-1] != 1.0 or np.any(np.diff(grid) <= 0):
                raise RangeError("Time grid must increase strictly from 0 to 1")

    @property
    def time_grid(self) -> torch.Tensor:
        if self.grid is not None:
            return torch.tensor(self.grid, dtype=torch.float64)
        return torch.linspace(0.0, 1.0, self.num_steps + 1, dtype=torch.float64)

    def g(self, t: float) -> float:
        if self.g_mode == "zero":
            return 0.0
        return 1.0 / (t + self.g_eps)

    def gamma_for(self, modality: str) -> float:
        return float(self.gamma.get(modality, DEFAULT_GAMMA))

    @classmethod
    def small_molecule(cls, **kwargs) -> "SampleSchedule":
        """Preset with the Cartesian churn raised for small molecules"""
        gamma = {**default_gamma(), "cart": SMALL_MOLECULE_CART_GAMMA, **kwargs.pop("gamma", {})}
        return cls(gamma=gamma, **kwargs)


@dataclass(frozen=True)
class SampleRequest:
    """What to generate. ``num_atoms`` None draws N from ``atom_count_histogram``."""
    domain: DomainClass
    num_samples: int = 1
    num_atoms: Optional[int] = None
    schedule: SampleSchedule = field(default_factory=SampleSchedule)
    atom_count_histogram: Optional[Dict[int, int]] = None

    def __post_init__(self):
        if self.num_samples < 1:
            raise RangeError(f"num_samples must be >= 1, got {self.num_samples}")
        if self.num_atoms is not None and self.num_atoms < 1:
            raise RangeError(f"num_atoms must be >= 1, got {self.num_atoms}")
        if self.num_atoms is None and not self.atom_count_histogram:
            raise RangeError("Either num_atoms or an atom-count histogram is required")
