from contextlib import contextmanager
from typing import Dict

import torch
import torch.nn as nn


class EMA:
    """Exponential moving average of the trainable parameters.

    ``shadow`` holds the averaged copies; ``averaged()`` swaps them into the
    model for sampling or evaluation and restores the raw weights after.
    """

    def __init__(self, model: nn.Module, decay: float = 0.999):
        self.model = model
        self.decay = decay
        self.shadow: Dict[str, torch.Tensor] = {
            name: param.detach().clone() for name, param in model.named_parameters() if param.requires_grad
        }
        self._backup: Dict[str, torch.Tensor] = {}

    @torch.no_grad()
    def update(self):
        for name, param in self.model.named_parameters():
            if name in self.shadow:
                self.shadow[name].mul_(self.decay).add_(param.detach(), alpha=1.0 - self.decay)

    @torch.no_grad()
    def apply_shadow(self):
        for name, param in self.model.named_parameters():
            if name in self.shadow:
                self._backup[name] = param.detach().clone()
                param.copy_(self.shadow[name])

    @torch.no_grad()
    def restore(self):
        for name, param in self.model.named_parameters():
            if name in self._backup:
                param.copy_(self._backup[name])
        self._backup = {}

    @contextmanager
    def averaged(self):
        self.apply_shadow()
        try:
            yield self.model
        finally:
            self.restore()

    def state_dict(self) -> Dict[str, torch.Tensor]:
        return dict(self.shadow)

    def load_state_dict(self, state: Dict[str, torch.Tensor]):
        for name, value in state.items():
            if name in self.shadow:
                self.shadow[name].copy_(value)
