from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn as nn

from ..errors import NonFiniteActivation, RangeError
from ..flow.batch import FlowBatch
from ..logger import get_logger
from ..schemas import TftConfig

AUX_HEADS = ("props", "energy", "forces")
NULL_CLASS = 2


@dataclass
class TrunkOutput:
    """Final-layer states, tap-layer states and the input embeddings"""
    z_final: torch.Tensor
    z_tap: torch.Tensor
    input_embeddings: torch.Tensor
    atom_mask: torch.Tensor


@dataclass
class DenoiseOutput:
    """Predicted clean endpoints (normalized lattice lengths, radian angles)"""
    atom_logits: torch.Tensor
    cart: torch.Tensor
    frac: torch.Tensor
    lengths: torch.Tensor
    angles: torch.Tensor


@dataclass
class AuxOutput:
    props: Optional[torch.Tensor] = None
    energy: Optional[torch.Tensor] = None
    forces: Optional[torch.Tensor] = None


@dataclass
class ModelOutput:
    denoise: Optional[DenoiseOutput]
    aux: AuxOutput
    trunk: TrunkOutput


class BaseDenoiser(nn.Module, ABC):
    """Base class for the denoiser variants.

    Subclasses provide the four stages; this class wires them together,
    handles class-label dropout and guards against non-finite activations.
    """

    variant: str = ""

    def __init__(self, config: TftConfig):
        super().__init__()
        self.config = config
        self.tap_layer = config.tap_layer
        self.logger = get_logger(f"model.{self.variant}")

    @abstractmethod
    def embed_inputs(self, batch: FlowBatch, class_labels: torch.Tensor) -> torch.Tensor:
        """Masked per-atom input embeddings h"""

    @abstractmethod
    def trunk_forward(self, h: torch.Tensor, atom_mask: torch.Tensor) -> TrunkOutput:
        """Run the L-layer trunk"""

    @abstractmethod
    def denoise_decode(self, trunk: TrunkOutput) -> DenoiseOutput:
        """Predict clean endpoints for all five modalities"""

    @abstractmethod
    def aux_decode(self, trunk: TrunkOutput, heads: Sequence[str]) -> AuxOutput:
        """Predict auxiliary targets from the tap-layer states"""

    @abstractmethod
    def aux_modules(self, heads: Sequence[str]) -> List[nn.Module]:
        """Modules owned by the given auxiliary heads"""

    def select_class_labels(self, domain: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """Swap the domain class for the null class with the dropout probability (training only)"""
        p = self.config.class_dropout_prob
        if not self.training or p <= 0:
            return domain
        draws = torch.rand(domain.shape, generator=generator, dtype=torch.float64)
        return torch.where(draws < p, torch.full_like(domain, NULL_CLASS), domain)

    def forward(self, batch: FlowBatch, aux_heads: Sequence[str] = (), denoise: bool = True,
                generator: Optional[torch.Generator] = None) -> ModelOutput:
        for head in aux_heads:
            if head not in AUX_HEADS:
                raise RangeError(f"Unknown auxiliary head {head!r}; expected one of {AUX_HEADS}")
        class_labels = self.select_class_labels(batch.domain, generator)
        h = self.embed_inputs(batch, class_labels)
        trunk = self.trunk_forward(h, batch.atom_mask)
        check_finite(trunk.z_final, "trunk")
        denoised = self.denoise_decode(trunk) if denoise else None
        aux = self.aux_decode(trunk, aux_heads) if aux_heads else AuxOutput()
        return ModelOutput(denoise=denoised, aux=aux, trunk=trunk)

    @torch.no_grad()
    def predict_endpoints(self, batch: FlowBatch) -> DenoiseOutput:
        """Deterministic endpoint prediction used by the sampler"""
        was_training = self.training
        self.eval()
        try:
            return self.forward(batch).denoise
        finally:
            self.train(was_training)

    def set_tap_layer(self, tap_layer: int):
        self.tap_layer = tap_layer

    def parameter_count(self, trainable_only: bool = False) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad or not trainable_only)

    def parameter_table(self) -> List[Dict]:
        return [
            {"name": name, "shape": list(p.shape), "numel": p.numel(), "trainable": p.requires_grad}
            for name, p in self.named_parameters()
        ]


def check_finite(tensor: torch.Tensor, where: str, step: Optional[int] = None):
    if not torch.isfinite(tensor).all():
        raise NonFiniteActivation(where, step)
