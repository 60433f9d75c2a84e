from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from ..config import Config
from ..core import AtomicSystem, DomainClass, normalize_lattice_for_flow, random_rigid_augment, zero_center
from ..errors import EmptyBatch, RangeError
from ..logger import get_logger
from ..utils import numpy_stream, torch_stream
from .interpolants import interpolate_continuous, interpolate_discrete, sample_time

logger = get_logger(__name__)

CONTINUOUS = ("cart", "frac", "lengths", "angles")
MOLECULE_MODALITIES = ("cart",)
MATERIAL_MODALITIES = ("frac", "lengths", "angles")


@dataclass
class Modalities:
    """The five flow channels. Unbatched: None marks a null modality.
    Batched: every field is a tensor and null slots hold zeros."""
    atom_types: Optional[torch.Tensor] = None
    cart: Optional[torch.Tensor] = None
    frac: Optional[torch.Tensor] = None
    lengths: Optional[torch.Tensor] = None
    angles: Optional[torch.Tensor] = None

    def get(self, name: str) -> Optional[torch.Tensor]:
        return getattr(self, name)

    def to(self, dtype=None, device=None) -> "Modalities":
        def _move(value, is_index):
            if value is None:
                return None
            return value.to(device=device) if is_index else value.to(device=device, dtype=dtype)
        return Modalities(
            atom_types=_move(self.atom_types, True),
            cart=_move(self.cart, False),
            frac=_move(self.frac, False),
            lengths=_move(self.lengths, False),
            angles=_move(self.angles, False),
        )


def active_modalities(domain: DomainClass) -> Sequence[str]:
    return MOLECULE_MODALITIES if domain is DomainClass.MOLECULE else MATERIAL_MODALITIES


@dataclass
class FlowState:
    """One noised copy of one system at time t"""
    t: float
    domain: DomainClass
    system: AtomicSystem
    clean: Modalities
    noisy: Modalities
    noise: Modalities

    @property
    def num_atoms(self) -> int:
        return self.system.num_atoms


@dataclass
class BatchLabels:
    properties: torch.Tensor
    properties_mask: torch.Tensor
    energy: torch.Tensor
    energy_mask: torch.Tensor
    forces: torch.Tensor
    forces_mask: torch.Tensor

    def to(self, dtype=None, device=None) -> "BatchLabels":
        return BatchLabels(
            properties=self.properties.to(device=device, dtype=dtype),
            properties_mask=self.properties_mask.to(device=device),
            energy=self.energy.to(device=device, dtype=dtype),
            energy_mask=self.energy_mask.to(device=device),
            forces=self.forces.to(device=device, dtype=dtype),
            forces_mask=self.forces_mask.to(device=device),
        )


@dataclass
class FlowBatch:
    """Padded batch fed to the denoiser.

    ``atom_mask`` marks real atoms; ``domain`` holds class indices (0
    molecule, 1 material).
    """
    ids: List[str]
    domain: torch.Tensor
    t: torch.Tensor
    atom_mask: torch.Tensor
    noisy: Modalities
    clean: Optional[Modalities] = None
    labels: Optional[BatchLabels] = None
    states: List[FlowState] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return int(self.domain.shape[0])

    @property
    def dtype(self) -> torch.dtype:
        return self.noisy.cart.dtype

    @property
    def num_atoms(self) -> torch.Tensor:
        return self.atom_mask.sum(dim=1)

    def domain_indicators(self):
        """(molecule, material) indicators as float tensors of shape (B,)"""
        molecule = (self.domain == DomainClass.MOLECULE.index).to(self.dtype)
        return molecule, 1 - molecule

    def to(self, dtype=None, device=None) -> "FlowBatch":
        return replace(
            self,
            domain=self.domain.to(device=device),
            t=self.t.to(device=device, dtype=dtype),
            atom_mask=self.atom_mask.to(device=device),
            noisy=self.noisy.to(dtype, device),
            clean=None if self.clean is None else self.clean.to(dtype, device),
            labels=None if self.labels is None else self.labels.to(dtype, device),
        )


def type_indices(system: AtomicSystem, num_atom_types: int) -> torch.Tensor:
    """Atom-type vocabulary index is Z − 1"""
    indices = torch.as_tensor(np.asarray(system.atomic_numbers) - 1, dtype=torch.long)
    if int(indices.max()) >= num_atom_types:
        raise RangeError(f"System {system.id!r} has Z={int(indices.max()) + 1} beyond the "
                         f"{num_atom_types}-type vocabulary")
    return indices


def clean_modalities(system: AtomicSystem, num_atom_types: int) -> Modalities:
    """Flow-space endpoints: centered molecules, normalized lattices"""
    atom_types = type_indices(system, num_atom_types)
    if not system.is_periodic:
        cart = torch.as_tensor(zero_center(system.cart_coords), dtype=torch.float64)
        return Modalities(atom_types=atom_types, cart=cart)
    lengths, angles = normalize_lattice_for_flow(system.lattice_lengths, system.lattice_angles, system.num_atoms)
    return Modalities(
        atom_types=atom_types,
        frac=torch.as_tensor(np.asarray(system.frac_coords), dtype=torch.float64),
        lengths=torch.as_tensor(lengths, dtype=torch.float64),
        angles=torch.as_tensor(angles, dtype=torch.float64),
    )


def noise_state(system: AtomicSystem, t: float, generator: torch.Generator, num_atom_types: int) -> FlowState:
    """Noise a (possibly augmented) system to time t"""
    clean = clean_modalities(system, num_atom_types)
    noise = Modalities()
    noisy = Modalities(atom_types=interpolate_discrete(clean.atom_types, t, num_atom_types, generator))
    for name in active_modalities(system.domain):
        x1 = clean.get(name)
        eps = torch.randn(x1.shape, generator=generator, dtype=torch.float64)
        setattr(noise, name, eps)
        setattr(noisy, name, interpolate_continuous(x1, eps, t))
    return FlowState(t=t, domain=system.domain, system=system, clean=clean, noisy=noisy, noise=noise)


def _pad(rows: List[Optional[torch.Tensor]], shape_tail, max_atoms: Optional[int], dtype) -> torch.Tensor:
    batch = len(rows)
    out = torch.zeros((batch, max_atoms, *shape_tail) if max_atoms else (batch, *shape_tail), dtype=dtype)
    for i, row in enumerate(rows):
        if row is None:
            continue
        if max_atoms:
            out[i, : row.shape[0]] = row
        else:
            out[i] = row
    return out


def collate_modalities(items: List[Modalities], max_atoms: int, dtype) -> Modalities:
    return Modalities(
        atom_types=_pad([m.atom_types for m in items], (), max_atoms, torch.long),
        cart=_pad([m.cart for m in items], (3,), max_atoms, dtype),
        frac=_pad([m.frac for m in items], (3,), max_atoms, dtype),
        lengths=_pad([m.lengths for m in items], (3,), None, dtype),
        angles=_pad([m.angles for m in items], (3,), None, dtype),
    )


def collate_labels(systems: List[AtomicSystem], max_atoms: int, dtype,
                   num_properties: int = Config.NUM_PROPERTIES) -> BatchLabels:
    batch = len(systems)
    properties = torch.zeros((batch, num_properties), dtype=dtype)
    properties_mask = torch.zeros((batch, num_properties), dtype=torch.bool)
    energy = torch.zeros(batch, dtype=dtype)
    energy_mask = torch.zeros(batch, dtype=torch.bool)
    forces = torch.zeros((batch, max_atoms, 3), dtype=dtype)
    forces_mask = torch.zeros(batch, dtype=torch.bool)
    for i, system in enumerate(systems):
        labels = system.labels
        if labels.properties is not None:
            values = torch.as_tensor(np.asarray(labels.properties), dtype=torch.float64)
            present = ~torch.isnan(values)
            properties[i] = torch.where(present, values, torch.zeros_like(values)).to(dtype)
            properties_mask[i] = present
        if labels.energy is not None:
            energy[i] = labels.energy
            energy_mask[i] = True
        if labels.forces is not None:
            forces[i, : system.num_atoms] = torch.as_tensor(np.asarray(labels.forces), dtype=dtype)
            forces_mask[i] = True
    return BatchLabels(properties, properties_mask, energy, energy_mask, forces, forces_mask)


def collate_states(states: List[FlowState], dtype=torch.float32) -> FlowBatch:
    if not states:
        raise EmptyBatch("Cannot collate an empty list of flow states")
    max_atoms = max(s.num_atoms for s in states)
    atom_mask = torch.zeros((len(states), max_atoms), dtype=torch.bool)
    for i, state in enumerate(states):
        atom_mask[i, : state.num_atoms] = True
    return FlowBatch(
        ids=[s.system.id for s in states],
        domain=torch.tensor([s.domain.index for s in states], dtype=torch.long),
        t=torch.tensor([s.t for s in states], dtype=dtype),
        atom_mask=atom_mask,
        noisy=collate_modalities([s.noisy for s in states], max_atoms, dtype),
        clean=collate_modalities([s.clean for s in states], max_atoms, dtype),
        labels=collate_labels([s.system for s in states], max_atoms, dtype),
        states=list(states),
    )


TimeFn = Callable[[torch.Generator], float]


def build_training_batch(systems: Sequence[AtomicSystem], copies: int = 8, seed: int = 0, step: int = 0,
                         alpha_t: float = 1.8, num_atom_types: int = Config.MAX_ATOMIC_NUMBER,
                         time_fn: Optional[TimeFn] = None, augment: bool = True,
                         num_workers: int = 0, dtype=torch.float32) -> FlowBatch:
    """Expand every system into ``copies`` augmented, independently noised copies.

    Each copy draws from streams keyed by (seed, step, position, id, copy),
    so the batch does not depend on how the work is scheduled.
    """
    if not systems:
        raise EmptyBatch("build_training_batch needs at least one system")
    if copies < 1:
        raise RangeError(f"copies must be >= 1, got {copies}")

    def _one(job):
        position, system, copy = job
        keys = (step, position, system.id, copy)
        augmented = random_rigid_augment(system, numpy_stream(seed, "augment", *keys)) if augment else system
        generator = torch_stream(seed, "noise", *keys)
        t = time_fn(generator) if time_fn is not None else sample_time(generator, alpha_t)
        return noise_state(augmented, t, generator, num_atom_types)

    jobs = [(i, system, c) for i, system in enumerate(systems) for c in range(copies)]
    if num_workers > 0 and not Config.DETERMINISTIC:
        with ThreadPoolExecutor(max_workers=num_workers) as pool:
            states = list(pool.map(_one, jobs))
    else:
        states = [_one(job) for job in jobs]
    return collate_states(states, dtype=dtype)
