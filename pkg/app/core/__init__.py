from .system import AtomicSystem, DomainClass, LabelSet, build_system
from .lattice import (
    Lattice,
    cart_from_frac,
    denormalize_lattice,
    frac_from_cart,
    lattice_matrix,
    lengths_and_angles,
    normalize_lattice_for_flow,
    periodic_distance_matrix,
    wrap_frac,
)
from .geometry import pairwise_distances, random_rigid_augment, random_rotation, zero_center

__all__ = [
    "AtomicSystem",
    "DomainClass",
    "LabelSet",
    "Lattice",
    "build_system",
    "cart_from_frac",
    "denormalize_lattice",
    "frac_from_cart",
    "lattice_matrix",
    "lengths_and_angles",
    "normalize_lattice_for_flow",
    "pairwise_distances",
    "periodic_distance_matrix",
    "random_rigid_augment",
    "random_rotation",
    "wrap_frac",
    "zero_center",
]
