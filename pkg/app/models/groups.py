"""Finite rotation groups of the Platonic solids.

Elements are realized as signed 3x3 permutation matrices with determinant
+1: all 24 of them form the octahedral (cube) group, and the 12 whose
permutation is even form the tetrahedral group.
"""
import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np

from ..errors import UnsupportedGroup

SUPPORTED_GROUPS = ("tetrahedral", "octahedral")
TOLERANCE = 1e-12


@dataclass(frozen=True)
class GroupTable:
    name: str
    rotations: np.ndarray  # (|G|, 3, 3)
    cayley: np.ndarray     # cayley[i, j] = index of g_i · g_j
    inverses: np.ndarray

    @property
    def order(self) -> int:
        return int(self.rotations.shape[0])


def _permutation_parity(perm: Tuple[int, ...]) -> int:
    inversions = sum(1 for i in range(len(perm)) for j in range(i + 1, len(perm)) if perm[i] > perm[j])
    return inversions % 2


def _signed_permutations(even_only: bool) -> np.ndarray:
    mats = []
    for perm in itertools.permutations(range(3)):
        if even_only and _permutation_parity(perm):
            continue
        for signs in itertools.product((1.0, -1.0), repeat=3):
            mat = np.zeros((3, 3))
            for row, col in enumerate(perm):
                mat[row, col] = signs[row]
            if np.linalg.det(mat) > 0:
                mats.append(mat)
    # itertools yields the identity permutation with all-positive signs first
    return np.stack(mats)


def _index_of(rotations: np.ndarray, mat: np.ndarray) -> int:
    diffs = np.abs(rotations - mat[None]).reshape(len(rotations), -1).max(axis=1)
    hits = np.flatnonzero(diffs < TOLERANCE)
    if hits.size != 1:
        raise ValueError("Group is not closed under composition")
    return int(hits[0])


def _verify(table: GroupTable, expected_order: int):
    rotations = table.rotations
    if table.order != expected_order:
        raise ValueError(f"{table.name} group has order {table.order}, expected {expected_order}")
    if not np.allclose(rotations[0], np.eye(3), atol=TOLERANCE):
        raise ValueError("Identity must sit at index 0")
    for i, mat in enumerate(rotations):
        if not np.allclose(mat.T @ mat, np.eye(3), atol=TOLERANCE) or abs(np.linalg.det(mat) - 1.0) > TOLERANCE:
            raise ValueError(f"Element {i} is not a proper rotation")
        if table.cayley[i, table.inverses[i]] != 0:
            raise ValueError(f"Inverse of element {i} is wrong")
    products = np.einsum("iab,jbc->ijac", rotations, rotations)
    if np.abs(products - rotations[table.cayley]).max() > TOLERANCE:
        raise ValueError("Cayley table disagrees with matrix products")


@lru_cache(maxsize=None)
def build_group(name: str) -> GroupTable:
    if name not in SUPPORTED_GROUPS:
        raise UnsupportedGroup(f"Unsupported group {name!r}; expected one of {SUPPORTED_GROUPS}")
    rotations = _signed_permutations(even_only=name == "tetrahedral")
    order = len(rotations)
    cayley = np.array([[_index_of(rotations, rotations[i] @ rotations[j]) for j in range(order)]
                       for i in range(order)], dtype=np.int64)
    inverses = np.array([int(np.flatnonzero(cayley[i] == 0)[0]) for i in range(order)], dtype=np.int64)

    table = GroupTable(name=name, rotations=rotations, cayley=cayley, inverses=inverses)
    _verify(table, 12 if name == "tetrahedral" else 24)
    return table
