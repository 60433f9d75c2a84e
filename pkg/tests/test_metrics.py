import dataclasses
import json

import numpy as np
import pytest

from app.core import build_system, random_rotation, wrap_frac
from app.errors import DomainMismatch, EmptyInput
from app.metrics.checks import (
    fingerprint,
    molecule_sanity,
    novelty_rate,
    structural_validity,
    unique_flags,
    uniqueness_rate,
)
from app.metrics.report import evaluate

from .conftest import make_ammonia, make_cscl, make_hydrogen, make_triclinic, make_water


def close_pair(id="close", separation=0.4, a=4.0):
    return build_system(id, "material", [8, 8], frac_coords=[[0.0, 0.0, 0.0], [separation / a, 0.0, 0.0]],
                        lattice_lengths=[a, a, a], lattice_angles=[90.0, 90.0, 90.0])


def rotated(system, seed=0, id=None):
    rotation = random_rotation(np.random.default_rng(seed))
    return system.replace(id=id or f"{system.id}-rot", cart_coords=system.cart_coords @ rotation.T)


class TestStructuralValidity:

    def test_close_pair_is_invalid(self):
        assert not structural_validity(close_pair())

    def test_body_centred_cubic_is_valid(self, cscl):
        assert structural_validity(cscl)

    def test_tiny_cell_is_invalid(self):
        side = 0.05 ** (1 / 3)
        tiny = build_system("tiny", "material", [1], frac_coords=[[0.0, 0.0, 0.0]],
                            lattice_lengths=[side] * 3, lattice_angles=[90.0] * 3)
        assert tiny.lattice.volume == pytest.approx(0.05)
        assert not structural_validity(tiny)

    def test_degenerate_cell_is_invalid(self, cscl):
        flat = dataclasses.replace(cscl, lattice_angles=np.array([60.0, 60.0, 120.0]))
        assert not structural_validity(flat)

    def test_molecule_is_rejected(self, water):
        with pytest.raises(DomainMismatch):
            structural_validity(water)


class TestMoleculeSanity:

    def test_hydrogen_molecule_passes(self):
        checks = molecule_sanity(make_hydrogen())
        assert checks.connected and checks.bond_lengths_ok and checks.no_clash
        assert checks.all_pass

    @pytest.mark.parametrize("system_fn", [make_water, make_ammonia])
    def test_small_molecules_pass(self, system_fn):
        assert molecule_sanity(system_fn()).all_pass

    def test_single_atom_passes(self):
        atom = build_system("he", "molecule", [2], cart_coords=[[0.0, 0.0, 0.0]])
        assert molecule_sanity(atom).all_pass

    def test_separated_fragments_are_disconnected(self):
        pair = build_system("two-h2", "molecule", [1, 1, 1, 1],
                            cart_coords=[[0, 0, 0], [0.74, 0, 0], [10.0, 0, 0], [10.74, 0, 0]])
        checks = molecule_sanity(pair)
        assert not checks.connected
        assert checks.bond_lengths_ok and checks.no_clash
        assert not checks.all_pass

    def test_compressed_pair_clashes(self):
        checks = molecule_sanity(make_hydrogen(bond=0.3 * 0.62))
        assert not checks.no_clash
        assert not checks.bond_lengths_ok

    def test_stretched_bond_fails_window(self):
        checks = molecule_sanity(make_hydrogen(bond=0.9))
        assert checks.connected and checks.no_clash
        assert not checks.bond_lengths_ok

    def test_material_is_rejected(self, cscl):
        with pytest.raises(DomainMismatch):
            molecule_sanity(cscl)


class TestUniqueness:

    def test_identical_copies(self, water):
        copies = [water.replace(id=f"w{i}") for i in range(5)]
        assert uniqueness_rate(copies) == pytest.approx(1 / 5)
        assert unique_flags(copies) == [True, False, False, False, False]

    def test_distinct_compositions(self):
        assert uniqueness_rate([make_water(), make_ammonia(), make_hydrogen(), make_cscl()]) == 1.0

    def test_rotated_molecule_is_a_duplicate(self, water):
        assert uniqueness_rate([water, rotated(water, seed=3)]) == 0.5

    def test_translated_material_is_a_duplicate(self):
        crystal = make_triclinic()
        shifted = crystal.replace(id="shifted", frac_coords=wrap_frac(crystal.frac_coords + [0.3, 0.1, 0.6]))
        assert uniqueness_rate([crystal, shifted]) == 0.5

    def test_permuted_atoms_are_a_duplicate(self, water):
        permuted = water.replace(id="perm", atomic_numbers=[1, 8, 1],
                                 cart_coords=water.cart_coords[[1, 0, 2]])
        assert uniqueness_rate([water, permuted]) == 0.5

    def test_distorted_molecule_is_distinct(self):
        assert uniqueness_rate([make_hydrogen(), make_hydrogen("h2b", bond=0.80)]) == 1.0

    def test_same_composition_across_domains_is_distinct(self):
        molecule = build_system("nacl-m", "molecule", [11, 17], cart_coords=[[0, 0, 0], [2.6, 0, 0]])
        assert uniqueness_rate([molecule, make_cscl()]) == 1.0

    def test_material_fingerprint_is_scale_free(self):
        _, _, small = fingerprint(make_cscl(a=3.0))
        _, _, large = fingerprint(make_cscl(a=6.0))
        np.testing.assert_allclose(small, large, atol=1e-12)

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            uniqueness_rate([])

    def test_novelty(self, water):
        samples = [rotated(water, seed=1), make_ammonia()]
        assert novelty_rate(samples, [water]) == 0.5
        with pytest.raises(EmptyInput):
            novelty_rate([], [water])


class TestEvaluate:

    def test_validity_rate_counts(self):
        valid = [make_cscl(f"ok-{i}", a=3.0 + 0.1 * i) for i in range(10)]
        invalid = [close_pair(f"bad-{i}", separation=0.2 + 0.02 * i) for i in range(10)]
        report = evaluate(valid + invalid)
        assert report.materials.count == 20
        assert report.materials.structural_validity_rate == 0.5
        assert report.molecules.count == 0
        assert report.molecules.connected_rate is None

    def test_report_recounts_from_flags(self):
        samples = [make_water(), make_ammonia(), make_hydrogen(bond=0.9),
                   make_hydrogen("h2-clash", bond=0.2), make_cscl(), close_pair(), make_water("water-2")]
        report = evaluate(samples)
        molecules = [f for f in report.per_sample if f.domain == "molecule"]
        materials = [f for f in report.per_sample if f.domain == "material"]
        assert report.molecules.count == len(molecules) == 5
        assert report.molecules.all_checks_count == sum(f.all_checks for f in molecules) == 3
        assert report.molecules.all_checks_rate == pytest.approx(3 / 5)
        assert report.molecules.connected_rate == pytest.approx(sum(f.connected for f in molecules) / 5)
        assert report.materials.valid_count == sum(f.structurally_valid for f in materials) == 1
        assert report.unique_count == sum(f.unique for f in report.per_sample) == 6
        assert report.uniqueness_rate == pytest.approx(6 / 7)
        assert report.novelty_rate is None
        assert all(f.structurally_valid is None for f in molecules)

    def test_novelty_against_reference(self, water):
        report = evaluate([rotated(water), make_ammonia()], reference=[water], metadata={"run": "x"})
        assert report.novel_count == 1
        assert report.novelty_rate == 0.5
        assert [f.novel for f in report.per_sample] == [False, True]
        assert report.metadata == {"run": "x"}

    def test_report_is_json_serializable(self, mixed_systems):
        payload = evaluate(mixed_systems).model_dump()
        assert json.loads(json.dumps(payload))["num_samples"] == 4

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            evaluate([])
