from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from ..config import Config
from ..errors import DomainFieldMismatch, NonFiniteInput, RangeError, ShapeError
from .lattice import Lattice, cart_from_frac, lattice_matrix

MIN_ANGLE, MAX_ANGLE = 60.0, 120.0


class DomainClass(str, Enum):
    MOLECULE = "molecule"
    MATERIAL = "material"

    @property
    def index(self) -> int:
        """Class-embedding index; the null class sits after the real ones"""
        return 0 if self is DomainClass.MOLECULE else 1

    @classmethod
    def from_index(cls, index: int) -> "DomainClass":
        return cls.MOLECULE if int(index) == 0 else cls.MATERIAL


@dataclass(frozen=True)
class LabelSet:
    """Optional prediction targets; missing property entries are NaN"""
    properties: Optional[np.ndarray] = None
    energy: Optional[float] = None
    forces: Optional[np.ndarray] = None

    @property
    def empty(self) -> bool:
        return self.properties is None and self.energy is None and self.forces is None


@dataclass(frozen=True)
class AtomicSystem:
    """One molecule or crystal with the five unified modalities"""
    id: str
    domain: DomainClass
    atomic_numbers: np.ndarray
    cart_coords: Optional[np.ndarray] = None
    frac_coords: Optional[np.ndarray] = None
    lattice_lengths: Optional[np.ndarray] = None
    lattice_angles: Optional[np.ndarray] = None
    labels: LabelSet = field(default_factory=LabelSet)

    @property
    def num_atoms(self) -> int:
        return int(self.atomic_numbers.shape[0])

    @property
    def is_periodic(self) -> bool:
        return self.domain is DomainClass.MATERIAL

    @property
    def lattice(self) -> Optional[Lattice]:
        if not self.is_periodic:
            return None
        return lattice_matrix(self.lattice_lengths, self.lattice_angles)

    def positions(self) -> np.ndarray:
        """Cartesian positions in Å for either domain"""
        if self.is_periodic:
            return cart_from_frac(self.frac_coords, self.lattice)
        return self.cart_coords

    def replace(self, **changes) -> "AtomicSystem":
        return build_system(**{**self.as_fields(), **changes})

    def as_fields(self) -> dict:
        return {
            "id": self.id,
            "domain": self.domain,
            "atomic_numbers": self.atomic_numbers,
            "cart_coords": self.cart_coords,
            "frac_coords": self.frac_coords,
            "lattice_lengths": self.lattice_lengths,
            "lattice_angles": self.lattice_angles,
            "properties": self.labels.properties,
            "energy": self.labels.energy,
            "forces": self.labels.forces,
        }


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def _matrix(values, n: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (n, 3):
        raise ShapeError(f"{name} must have shape ({n}, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput(f"{name} contains non-finite values")
    return arr


def _vector3(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (3,):
        raise ShapeError(f"{name} must have shape (3,), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput(f"{name} contains non-finite values")
    return arr


def build_system(id: str, domain, atomic_numbers, cart_coords=None, frac_coords=None,
                 lattice_lengths=None, lattice_angles=None, properties=None, energy=None,
                 forces=None) -> AtomicSystem:
    """Validate raw fields and assemble an immutable AtomicSystem"""
    domain = DomainClass(domain)

    numbers = np.asarray(atomic_numbers)
    if numbers.ndim != 1:
        raise ShapeError(f"atomic_numbers must be 1-D, got shape {numbers.shape}")
    if numbers.shape[0] < 1:
        raise ShapeError("A system needs at least one atom")
    if not np.issubdtype(numbers.dtype, np.integer):
        if not np.all(np.equal(np.mod(numbers, 1), 0)):
            raise RangeError("atomic_numbers must be integers")
    numbers = numbers.astype(np.int64)
    if numbers.min() < 1 or numbers.max() > Config.MAX_ATOMIC_NUMBER:
        raise RangeError(f"atomic_numbers must lie in [1, {Config.MAX_ATOMIC_NUMBER}]")
    n = numbers.shape[0]

    periodic_given = [v is not None for v in (frac_coords, lattice_lengths, lattice_angles)]
    if domain is DomainClass.MOLECULE:
        if any(periodic_given):
            raise DomainFieldMismatch(f"Molecule {id!r} must not carry fractional coordinates or a lattice")
        if cart_coords is None:
            raise DomainFieldMismatch(f"Molecule {id!r} needs Cartesian coordinates")
        cart = _matrix(cart_coords, n, "cart_coords")
        frac = lengths = angles = None
    else:
        if not all(periodic_given):
            raise DomainFieldMismatch(f"Material {id!r} needs fractional coordinates, lattice lengths and angles")
        if cart_coords is not None:
            raise DomainFieldMismatch(f"Material {id!r} must not carry Cartesian coordinates")
        cart = None
        frac = _matrix(frac_coords, n, "frac_coords")
        if np.any(frac < 0.0) or np.any(frac >= 1.0):
            raise RangeError(f"Material {id!r} fractional coordinates must lie in [0, 1)")
        lengths = _vector3(lattice_lengths, "lattice_lengths")
        if np.any(lengths <= 0):
            raise RangeError(f"Material {id!r} lattice lengths must be positive")
        angles = _vector3(lattice_angles, "lattice_angles")
        if np.any(angles < MIN_ANGLE) or np.any(angles > MAX_ANGLE):
            raise RangeError(f"Material {id!r} lattice angles must lie in [{MIN_ANGLE}, {MAX_ANGLE}] degrees")
        lattice_matrix(lengths, angles)

    props = None
    if properties is not None:
        props = np.array([np.nan if p is None else p for p in np.asarray(properties, dtype=object).ravel()],
                         dtype=np.float64)
        if props.shape != (Config.NUM_PROPERTIES,):
            raise ShapeError(f"properties must have {Config.NUM_PROPERTIES} entries, got {props.shape[0]}")
    energy_value = None
    if energy is not None:
        energy_value = float(energy)
        if not np.isfinite(energy_value):
            raise NonFiniteInput("energy is not finite")
    force_matrix = None
    if forces is not None:
        force_matrix = np.asarray(forces, dtype=np.float64)
        if force_matrix.ndim != 2 or force_matrix.shape[0] != n:
            raise ShapeError(f"forces must have exactly {n} rows, got shape {force_matrix.shape}")
        force_matrix = _matrix(force_matrix, n, "forces")

    return AtomicSystem(
        id=str(id),
        domain=domain,
        atomic_numbers=_frozen(numbers),
        cart_coords=None if cart is None else _frozen(cart),
        frac_coords=None if frac is None else _frozen(frac),
        lattice_lengths=None if lengths is None else _frozen(lengths),
        lattice_angles=None if angles is None else _frozen(angles),
        labels=LabelSet(
            properties=None if props is None else _frozen(props),
            energy=energy_value,
            forces=None if force_matrix is None else _frozen(force_matrix),
        ),
    )


