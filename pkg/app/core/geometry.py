import numpy as np
from scipy.spatial.transform import Rotation

from ..errors import RangeError, ShapeError
from .lattice import wrap_frac
from .system import AtomicSystem


def zero_center(cart) -> np.ndarray:
    """Subtract the centroid so column means are zero"""
    cart = np.asarray(cart, dtype=np.float64)
    if cart.ndim != 2 or cart.shape[1] != 3:
        raise ShapeError(f"Coordinates must have shape (N, 3), got {cart.shape}")
    if cart.shape[0] < 1:
        raise RangeError("zero_center needs at least one atom")
    return cart - cart.mean(axis=0, keepdims=True)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation matrix on SO(3)"""
    return Rotation.random(random_state=rng).as_matrix()


def random_rigid_augment(system: AtomicSystem, rng: np.random.Generator) -> AtomicSystem:
    """Rotate molecules, translate materials in fractional space.

    Forces rotate with molecular coordinates; a fractional translation leaves
    Cartesian force labels unchanged.
    """
    if system.is_periodic:
        shift = rng.uniform(0.0, 1.0, size=3)
        return system.replace(frac_coords=wrap_frac(system.frac_coords + shift[None, :]))

    rotation = random_rotation(rng)
    rotated = zero_center(system.cart_coords @ rotation.T)
    forces = system.labels.forces
    if forces is not None:
        forces = forces @ rotation.T
    return system.replace(cart_coords=rotated, forces=forces)


def pairwise_distances(cart) -> np.ndarray:
    cart = np.asarray(cart, dtype=np.float64)
    delta = cart[:, None, :] - cart[None, :, :]
    return np.linalg.norm(delta, axis=-1)
