from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F

from ..errors import DomainMismatch, RangeError, ShapeError
from .batch import FlowBatch
from .interpolants import loss_weight


@dataclass(frozen=True)
class LossWeights:
    lambda_discrete: float = 0.1
    alpha_t: float = 1.8

    def __post_init__(self):
        if not 0.0 <= self.lambda_discrete <= 1.0:
            raise RangeError(f"lambda_discrete must lie in [0, 1], got {self.lambda_discrete}")
        if self.alpha_t <= 0:
            raise RangeError(f"alpha_t must be positive, got {self.alpha_t}")


def continuous_modality_loss(pred: torch.Tensor, target: torch.Tensor, num_atoms: Optional[int] = None) -> torch.Tensor:
    """(1/N)·‖pred − target‖².

    N is the row count for per-atom (N, 3) inputs and the component count 3
    for a lattice 3-vector.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"Prediction shape {tuple(pred.shape)} does not match target {tuple(target.shape)}")
    if num_atoms is None:
        num_atoms = pred.shape[0] if pred.ndim > 1 else pred.numel()
    return (pred - target).pow(2).sum() / num_atoms


def discrete_loss(logits: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    if logits.ndim != 2 or a.shape != logits.shape[:1]:
        raise ShapeError(f"Logits {tuple(logits.shape)} do not match {tuple(a.shape)} atom types")
    return F.cross_entropy(logits, a.long())


# Batched, padded counterparts returning one value per batch element

def masked_coordinate_loss(pred: torch.Tensor, target: torch.Tensor, atom_mask: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"Prediction shape {tuple(pred.shape)} does not match target {tuple(target.shape)}")
    mask = atom_mask.bool()
    squared = torch.where(mask, (pred - target).pow(2).sum(dim=-1), 0.0)
    return squared.sum(dim=1) / mask.sum(dim=1).clamp_min(1).to(pred.dtype)


def lattice_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"Prediction shape {tuple(pred.shape)} does not match target {tuple(target.shape)}")
    return (pred - target).pow(2).sum(dim=-1) / pred.shape[-1]


def masked_discrete_loss(logits: torch.Tensor, a: torch.Tensor, atom_mask: torch.Tensor) -> torch.Tensor:
    if logits.shape[:2] != a.shape:
        raise ShapeError(f"Logits {tuple(logits.shape)} do not match atom types {tuple(a.shape)}")
    per_atom = F.cross_entropy(logits.transpose(1, 2), a.long(), reduction="none")
    mask = atom_mask.bool()
    return torch.where(mask, per_atom, 0.0).sum(dim=1) / mask.sum(dim=1).clamp_min(1).to(logits.dtype)


def _active(indicator: torch.Tensor, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """pred where the modality exists, the target elsewhere"""
    shape = indicator.shape + (1,) * (pred.ndim - 1)
    return torch.where(indicator.view(shape), pred, target)


def total_training_loss(outputs, batch: FlowBatch,
                        weights: LossWeights = LossWeights()) -> Tuple[torch.Tensor, Dict[str, float]]:
    """β(t)·L_total averaged over the batch, plus the unweighted terms.

    Null modalities are selected away with the domain indicator, so whatever
    the model writes there, NaN included, adds neither loss nor gradient.
    """
    if batch.clean is None:
        raise DomainMismatch("Batch carries no clean targets")
    if outputs.cart.shape != batch.clean.cart.shape or outputs.lengths.shape != batch.clean.lengths.shape:
        raise DomainMismatch(f"Outputs for {tuple(outputs.cart.shape)} do not match batch "
                             f"{tuple(batch.clean.cart.shape)}")

    molecule, material = batch.domain_indicators()
    molecule, material = molecule.bool(), material.bool()
    clean = batch.clean
    terms = {
        "cart": torch.where(molecule, masked_coordinate_loss(_active(molecule, outputs.cart, clean.cart),
                                                             clean.cart, batch.atom_mask), 0.0),
        "frac": torch.where(material, masked_coordinate_loss(_active(material, outputs.frac, clean.frac),
                                                             clean.frac, batch.atom_mask), 0.0),
        "lengths": torch.where(material, lattice_loss(_active(material, outputs.lengths, clean.lengths),
                                                      clean.lengths), 0.0),
        "angles": torch.where(material, lattice_loss(_active(material, outputs.angles, clean.angles),
                                                     clean.angles), 0.0),
        "atom_types": masked_discrete_loss(outputs.atom_logits, clean.atom_types, batch.atom_mask),
    }
    per_sample = (terms["cart"] + terms["frac"] + terms["lengths"] + terms["angles"]
                  + weights.lambda_discrete * terms["atom_types"])
    beta = loss_weight(batch.t.to(per_sample.dtype))
    loss = (beta * per_sample).mean()

    breakdown = {name: float(value.detach().mean()) for name, value in terms.items()}
    breakdown["unweighted_total"] = float(per_sample.detach().mean())
    breakdown["loss"] = float(loss.detach())
    return loss, breakdown
