from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from ..core import AtomicSystem, pairwise_distances, periodic_distance_matrix
from ..core.elements import covalent_radius
from ..errors import DegenerateCell, DomainMismatch, EmptyInput

MIN_PAIR_DISTANCE = 0.5   # Å
MIN_CELL_VOLUME = 0.1     # Å³
BOND_SLACK = 0.4          # Å added to the radii sum for the bond graph
BOND_WINDOW = (0.75, 1.25)
CLASH_FACTOR = 0.8
MATCH_TOLERANCE = 1e-2


def structural_validity(material: AtomicSystem) -> bool:
    """Minimum-image distances >= 0.5 Å and cell volume >= 0.1 Å³"""
    if not material.is_periodic:
        raise DomainMismatch(f"structural_validity needs a material, got molecule {material.id!r}")
    try:
        lattice = material.lattice
    except DegenerateCell:
        return False
    if lattice.volume < MIN_CELL_VOLUME:
        return False
    distances = periodic_distance_matrix(material.frac_coords, lattice)
    return bool(distances.min() >= MIN_PAIR_DISTANCE)


def _reference_distances(numbers: np.ndarray) -> np.ndarray:
    radii = np.array([covalent_radius(int(z)) for z in numbers])
    return radii[:, None] + radii[None, :]


@dataclass(frozen=True)
class MoleculeChecks:
    connected: bool
    bond_lengths_ok: bool
    no_clash: bool

    @property
    def all_pass(self) -> bool:
        return self.connected and self.bond_lengths_ok and self.no_clash


def molecule_sanity(molecule: AtomicSystem) -> MoleculeChecks:
    """Connectivity, bond-length window and steric-clash checks.

    Bonds are pairs closer than the covalent-radii sum plus 0.4 Å. A pair
    only escapes the clash rule when its distance lies inside the bond
    window; every other pair must stay at least 0.8x the radii sum apart.
    """
    if molecule.is_periodic:
        raise DomainMismatch(f"molecule_sanity needs a molecule, got material {molecule.id!r}")
    n = molecule.num_atoms
    if n == 1:
        return MoleculeChecks(connected=True, bond_lengths_ok=True, no_clash=True)

    distances = pairwise_distances(molecule.cart_coords)
    reference = _reference_distances(molecule.atomic_numbers)
    off_diagonal = ~np.eye(n, dtype=bool)

    bonded = (distances < reference + BOND_SLACK) & off_diagonal
    num_components, _ = connected_components(csr_matrix(bonded), directed=False)

    low, high = BOND_WINDOW
    in_window = (distances >= low * reference) & (distances <= high * reference)
    bond_lengths_ok = bool(np.all(in_window[bonded]))
    clash = (distances < CLASH_FACTOR * reference) & ~in_window & off_diagonal
    return MoleculeChecks(connected=num_components == 1, bond_lengths_ok=bond_lengths_ok,
                          no_clash=not bool(clash.any()))


Composition = Tuple[int, ...]


def fingerprint(system: AtomicSystem) -> Tuple[str, Composition, np.ndarray]:
    """Rotation/permutation-invariant key: domain, sorted composition, sorted distances.

    Molecules use raw pairwise distances in Å. Materials use minimum-image
    distances (diagonal = shortest self-image) scaled by (V/N)^(1/3).
    """
    composition = tuple(sorted(int(z) for z in system.atomic_numbers))
    n = system.num_atoms
    if system.is_periodic:
        lattice = system.lattice
        distances = periodic_distance_matrix(system.frac_coords, lattice)
        values = distances[np.triu_indices(n)] / np.cbrt(lattice.volume / n)
    else:
        values = pairwise_distances(system.cart_coords)[np.triu_indices(n, k=1)]
    return system.domain.value, composition, np.sort(values)


class FingerprintIndex:
    """Buckets fingerprints by (domain, composition) for matching"""

    def __init__(self, tolerance: float = MATCH_TOLERANCE):
        self.tolerance = tolerance
        self._buckets: Dict[Tuple[str, Composition], List[np.ndarray]] = {}

    def matches(self, key) -> bool:
        domain, composition, values = key
        for other in self._buckets.get((domain, composition), []):
            if other.shape == values.shape and np.max(np.abs(other - values), initial=0.0) <= self.tolerance:
                return True
        return False

    def add(self, key):
        domain, composition, values = key
        self._buckets.setdefault((domain, composition), []).append(values)

    @classmethod
    def from_systems(cls, systems: Iterable[AtomicSystem], tolerance: float = MATCH_TOLERANCE) -> "FingerprintIndex":
        index = cls(tolerance)
        for system in systems:
            try:
                index.add(fingerprint(system))
            except DegenerateCell:
                continue
        return index


def unique_flags(systems: Sequence[AtomicSystem], tolerance: float = MATCH_TOLERANCE) -> List[bool]:
    """True for each system not matched to an earlier one"""
    index = FingerprintIndex(tolerance)
    flags = []
    for system in systems:
        try:
            key = fingerprint(system)
        except DegenerateCell:
            flags.append(True)
            continue
        flags.append(not index.matches(key))
        index.add(key)
    return flags


def uniqueness_rate(systems: Sequence[AtomicSystem], tolerance: float = MATCH_TOLERANCE) -> float:
    if not systems:
        raise EmptyInput("uniqueness_rate needs at least one system")
    flags = unique_flags(systems, tolerance)
    return sum(flags) / len(flags)


def novel_flags(systems: Sequence[AtomicSystem], reference: Sequence[AtomicSystem],
                tolerance: float = MATCH_TOLERANCE) -> List[bool]:
    """True for each system not matched anywhere in the reference set"""
    index = FingerprintIndex.from_systems(reference, tolerance)
    flags = []
    for system in systems:
        try:
            flags.append(not index.matches(fingerprint(system)))
        except DegenerateCell:
            flags.append(True)
    return flags


def novelty_rate(systems: Sequence[AtomicSystem], reference: Sequence[AtomicSystem],
                 tolerance: float = MATCH_TOLERANCE) -> Optional[float]:
    if not systems:
        raise EmptyInput("novelty_rate needs at least one system")
    flags = novel_flags(systems, reference, tolerance)
    return sum(flags) / len(flags)
