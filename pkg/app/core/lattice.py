"""Crystallographic geometry.

Row-vector convention throughout: the lattice matrix holds the basis vectors
a, b, c as rows and Cartesian positions are X = F · L.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from ..errors import DegenerateCell, NonFiniteInput, RangeError, ShapeError

DEGENERATE_VOLUME = 1e-12
# squared height of c over the ab-plane, relative to c², below which the cell is flat
DEGENERATE_SHAPE = 1e-10


@dataclass(frozen=True)
class Lattice:
    """Unit cell as lengths (Å), angles (degrees) and the row-basis matrix"""
    lengths: np.ndarray
    angles: np.ndarray
    matrix: np.ndarray

    @property
    def volume(self) -> float:
        return float(np.linalg.det(self.matrix))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Lattice":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (3, 3):
            raise ShapeError(f"Lattice matrix must be 3x3, got {matrix.shape}")
        volume = float(np.linalg.det(matrix))
        if volume <= DEGENERATE_VOLUME:
            raise DegenerateCell(volume)
        lengths, angles = lengths_and_angles(matrix)
        return cls(lengths=lengths, angles=angles, matrix=matrix)


def _as_vector3(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (3,):
        raise ShapeError(f"{name} must have shape (3,), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput(f"{name} contains non-finite values")
    return arr


def _as_points(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeError(f"{name} must have shape (N, 3), got {arr.shape}")
    return arr


def lattice_matrix(lengths, angles) -> Lattice:
    """Build the cell with a along +x and b in the xy-plane"""
    lengths = _as_vector3(lengths, "lattice lengths")
    angles = _as_vector3(angles, "lattice angles")
    if np.any(lengths <= 0):
        raise RangeError(f"Lattice lengths must be positive, got {lengths.tolist()}")
    if np.any(angles <= 0) or np.any(angles >= 180):
        raise RangeError(f"Lattice angles must lie in (0, 180), got {angles.tolist()}")

    a, b, c = lengths
    alpha, beta, gamma = np.deg2rad(angles)
    cos_alpha, cos_beta, cos_gamma = np.cos(alpha), np.cos(beta), np.cos(gamma)
    sin_gamma = np.sin(gamma)

    c_x = c * cos_beta
    c_y = c * (cos_alpha - cos_beta * cos_gamma) / sin_gamma
    c_z_sq = c * c - c_x * c_x - c_y * c_y
    if c_z_sq <= DEGENERATE_SHAPE * c * c:
        raise DegenerateCell(float(a * b * sin_gamma * np.sqrt(max(c_z_sq, 0.0))))

    matrix = np.array([
        [a, 0.0, 0.0],
        [b * cos_gamma, b * sin_gamma, 0.0],
        [c_x, c_y, np.sqrt(c_z_sq)],
    ])
    volume = float(np.linalg.det(matrix))
    if volume <= DEGENERATE_VOLUME:
        raise DegenerateCell(volume)
    return Lattice(lengths=lengths.copy(), angles=angles.copy(), matrix=matrix)


def lengths_and_angles(matrix: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Recover (a, b, c) and (α, β, γ) in degrees from a row-basis matrix"""
    matrix = np.asarray(matrix, dtype=np.float64)
    lengths = np.linalg.norm(matrix, axis=1)
    a_vec, b_vec, c_vec = matrix

    def _angle(u, v, nu, nv):
        cosine = np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0)
        return np.rad2deg(np.arccos(cosine))

    angles = np.array([
        _angle(b_vec, c_vec, lengths[1], lengths[2]),
        _angle(a_vec, c_vec, lengths[0], lengths[2]),
        _angle(a_vec, b_vec, lengths[0], lengths[1]),
    ])
    return lengths, angles


def cart_from_frac(frac, lattice: Lattice) -> np.ndarray:
    frac = _as_points(frac, "fractional coordinates")
    if lattice.volume <= DEGENERATE_VOLUME:
        raise DegenerateCell(lattice.volume)
    return frac @ lattice.matrix


def frac_from_cart(cart, lattice: Lattice) -> np.ndarray:
    """Exact inverse of cart_from_frac, without wrapping"""
    cart = _as_points(cart, "Cartesian coordinates")
    if lattice.volume <= DEGENERATE_VOLUME:
        raise DegenerateCell(lattice.volume)
    return np.linalg.solve(lattice.matrix.T, cart.T).T


def wrap_frac(frac) -> np.ndarray:
    """Reduce fractional coordinates into [0, 1)"""
    frac = np.asarray(frac, dtype=np.float64)
    if not np.all(np.isfinite(frac)):
        raise NonFiniteInput("Fractional coordinates contain non-finite values")
    wrapped = np.mod(frac, 1.0)
    # np.mod of a tiny negative number can round up to exactly 1.0
    wrapped[wrapped >= 1.0] = 0.0
    return wrapped


def normalize_lattice_for_flow(lengths, angles, num_atoms: int) -> Tuple[np.ndarray, np.ndarray]:
    """Lengths divided by N^(1/3), angles converted to radians"""
    if num_atoms < 1:
        raise RangeError(f"Atom count must be >= 1, got {num_atoms}")
    lengths = _as_vector3(lengths, "lattice lengths")
    angles = _as_vector3(angles, "lattice angles")
    return lengths / np.cbrt(float(num_atoms)), np.deg2rad(angles)


def denormalize_lattice(norm_lengths, angles_rad, num_atoms: int) -> Tuple[np.ndarray, np.ndarray]:
    if num_atoms < 1:
        raise RangeError(f"Atom count must be >= 1, got {num_atoms}")
    norm_lengths = _as_vector3(norm_lengths, "normalized lattice lengths")
    angles_rad = _as_vector3(angles_rad, "lattice angles")
    return norm_lengths * np.cbrt(float(num_atoms)), np.rad2deg(angles_rad)


def periodic_distance_matrix(frac, lattice: Lattice) -> np.ndarray:
    """Minimum-image distances over the 27 neighbouring cell shifts.

    The diagonal holds each atom's distance to its own nearest periodic image.
    """
    frac = _as_points(frac, "fractional coordinates")
    shifts = np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.float64)
    delta = frac[None, :, :] - frac[:, None, :]
    images = delta[:, :, None, :] + shifts[None, None, :, :]
    cart = images @ lattice.matrix
    dist = np.linalg.norm(cart, axis=-1)

    n = frac.shape[0]
    zero_shift = 13  # index of (0, 0, 0)
    dist[np.arange(n), np.arange(n), zero_shift] = np.inf
    return dist.min(axis=-1)
