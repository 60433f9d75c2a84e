import dataclasses
import math

import numpy as np
import pytest
import torch
from scipy import stats

from app.core import pairwise_distances, periodic_distance_matrix
from app.errors import DomainMismatch, EmptyBatch, RangeError, ShapeError
from app.flow.batch import build_training_batch, clean_modalities
from app.flow.interpolants import interpolate_continuous, interpolate_discrete, loss_weight, sample_time
from app.flow.losses import (
    LossWeights,
    continuous_modality_loss,
    discrete_loss,
    masked_coordinate_loss,
    total_training_loss,
)
from app.models.base import AUX_HEADS, DenoiseOutput
from app.models.registry import build_model

from .conftest import (
    TOY_ATOM_TYPES,
    finite_difference_pairs,
    make_ammonia,
    make_cscl,
    make_triclinic,
    make_water,
    randomize_parameters,
    tiny_config,
)


class TestInterpolants:

    def test_time_mean_matches_beta(self):
        t = sample_time(torch.Generator().manual_seed(0), 1.8, size=(1_000_000,))
        assert float(t.mean()) == pytest.approx(1.8 / 2.8, abs=1e-3)
        assert float(t.min()) >= 0.0 and float(t.max()) <= 1.0

    def test_alpha_one_is_uniform(self):
        t = sample_time(torch.Generator().manual_seed(1), 1.0, size=(20_000,))
        assert stats.kstest(t.numpy(), "uniform").pvalue > 1e-3

    def test_scalar_draw_is_a_float(self):
        assert isinstance(sample_time(torch.Generator().manual_seed(2)), float)

    def test_rejects_non_positive_alpha(self):
        with pytest.raises(RangeError):
            sample_time(torch.Generator(), 0.0)

    def test_continuous_endpoints(self):
        x1 = torch.randn(4, 3, dtype=torch.float64)
        eps = torch.randn(4, 3, dtype=torch.float64)
        assert torch.equal(interpolate_continuous(x1, eps, 1.0), x1)
        assert torch.equal(interpolate_continuous(x1, eps, 0.0), eps)
        midpoint = interpolate_continuous(torch.tensor([2.0]), torch.tensor([0.0]), 0.5)
        assert float(midpoint) == 1.0

    def test_continuous_shape_mismatch(self):
        with pytest.raises(ShapeError):
            interpolate_continuous(torch.zeros(2, 3), torch.zeros(3, 3), 0.5)

    def test_discrete_clean_endpoint(self):
        a = torch.randint(0, 10, (500,), generator=torch.Generator().manual_seed(0))
        assert torch.equal(interpolate_discrete(a, 1.0, 10, torch.Generator().manual_seed(1)), a)

    def test_discrete_noise_endpoint_is_uniform(self):
        a = torch.full((100_000,), 3, dtype=torch.long)
        noised = interpolate_discrete(a, 0.0, 5, torch.Generator().manual_seed(2))
        counts = torch.bincount(noised, minlength=5).numpy()
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_discrete_mixture_probabilities(self):
        a = torch.full((100_000,), 2, dtype=torch.long)
        noised = interpolate_discrete(a, 0.5, 4, torch.Generator().manual_seed(3))
        freq = torch.bincount(noised, minlength=4).double() / a.numel()
        assert float(freq[2]) == pytest.approx(0.625, abs=0.01)
        for other in (0, 1, 3):
            assert float(freq[other]) == pytest.approx(0.125, abs=0.01)

    def test_discrete_type_out_of_vocabulary(self):
        with pytest.raises(RangeError):
            interpolate_discrete(torch.tensor([4]), 0.5, 4, torch.Generator())

    @pytest.mark.parametrize("t, expected", [(0.0, 1.0), (0.5, 4.0), (0.99, 100.0), (1.0, 100.0)])
    def test_loss_weight(self, t, expected):
        assert loss_weight(t) == pytest.approx(expected)
        assert float(loss_weight(torch.tensor([t], dtype=torch.float64))) == pytest.approx(expected)

    def test_loss_weight_out_of_range(self):
        with pytest.raises(RangeError):
            loss_weight(1.5)


class TestLosses:

    def test_continuous_zero_at_target(self):
        x = torch.randn(5, 3)
        assert float(continuous_modality_loss(x, x.clone())) == 0.0

    def test_continuous_is_mean_over_atoms(self):
        pred = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        assert float(continuous_modality_loss(pred, torch.zeros(2, 3))) == pytest.approx(1.0)

    def test_lattice_vector_divides_by_three(self):
        assert float(continuous_modality_loss(torch.tensor([1.0, 1.0, 1.0]), torch.zeros(3))) == pytest.approx(1.0)

    def test_discrete_saturates(self):
        logits = torch.tensor([[50.0, 0.0, 0.0]], dtype=torch.float64)
        assert float(discrete_loss(logits, torch.tensor([0]))) < 1e-9

    def test_discrete_equal_logits(self):
        logits = torch.zeros(1, 2, dtype=torch.float64)
        assert float(discrete_loss(logits, torch.tensor([0]))) == pytest.approx(math.log(2), abs=1e-12)

    def test_discrete_is_shift_invariant(self):
        logits = torch.randn(6, 4, dtype=torch.float64)
        a = torch.tensor([0, 1, 2, 3, 0, 1])
        assert float(discrete_loss(logits + 7.0, a)) == pytest.approx(float(discrete_loss(logits, a)), abs=1e-12)

    def test_masked_coordinate_loss_ignores_padding(self):
        pred = torch.tensor([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [9.0, 9.0, 9.0]]])
        mask = torch.tensor([[True, True, False]])
        assert float(masked_coordinate_loss(pred, torch.zeros_like(pred), mask)[0]) == pytest.approx(1.0)

    def test_loss_weights_validate(self):
        with pytest.raises(RangeError):
            LossWeights(lambda_discrete=1.5)


def _perfect_outputs(batch) -> DenoiseOutput:
    clean = batch.clean
    logits = torch.nn.functional.one_hot(clean.atom_types, TOY_ATOM_TYPES).double() * 1e4
    return DenoiseOutput(
        atom_logits=logits.requires_grad_(True),
        cart=clean.cart.clone().requires_grad_(True),
        frac=clean.frac.clone().requires_grad_(True),
        lengths=clean.lengths.clone().requires_grad_(True),
        angles=clean.angles.clone().requires_grad_(True),
    )


class TestTrainingLoss:

    @pytest.fixture
    def batch(self):
        return build_training_batch([make_water(), make_cscl()], copies=2, seed=4,
                                    num_atom_types=TOY_ATOM_TYPES, dtype=torch.float64)

    def test_perfect_predictions_give_zero(self, batch):
        loss, breakdown = total_training_loss(_perfect_outputs(batch), batch)
        assert float(loss) == 0.0
        assert breakdown["unweighted_total"] == 0.0

    def test_null_slots_contribute_nothing(self, batch):
        outputs = _perfect_outputs(batch)
        molecule, material = batch.domain_indicators()
        with torch.no_grad():
            outputs.frac[molecule.bool()] += 17.0
            outputs.lengths[molecule.bool()] -= 3.0
            outputs.angles[molecule.bool()] += 2.0
            outputs.cart[material.bool()] += 11.0
        loss, _ = total_training_loss(outputs, batch)
        assert float(loss) == 0.0

    def test_null_slots_get_zero_gradient(self, batch):
        outputs = _perfect_outputs(batch)
        with torch.no_grad():
            for tensor in (outputs.cart, outputs.frac, outputs.lengths, outputs.angles):
                tensor.add_(0.5)
        loss, breakdown = total_training_loss(outputs, batch)
        loss.backward()
        molecule, material = batch.domain_indicators()
        assert torch.all(outputs.frac.grad[molecule.bool()] == 0)
        assert torch.all(outputs.lengths.grad[molecule.bool()] == 0)
        assert torch.all(outputs.angles.grad[molecule.bool()] == 0)
        assert torch.all(outputs.cart.grad[material.bool()] == 0)
        assert torch.any(outputs.cart.grad[molecule.bool()] != 0)
        assert breakdown["cart"] > 0 and breakdown["frac"] > 0

    def test_nan_in_null_slots_is_ignored(self, batch):
        outputs = _perfect_outputs(batch)
        with torch.no_grad():
            outputs.cart.add_(0.25)
        reference, reference_terms = total_training_loss(outputs, batch)
        molecule, material = batch.domain_indicators()
        with torch.no_grad():
            outputs.frac[molecule.bool()] = float("nan")
            outputs.lengths[molecule.bool()] = float("nan")
            outputs.angles[molecule.bool()] = float("inf")
            outputs.cart[material.bool()] = float("nan")
        loss, breakdown = total_training_loss(outputs, batch)
        assert torch.isfinite(loss)
        assert float(loss) == float(reference)
        assert breakdown == reference_terms
        loss.backward()
        for tensor in (outputs.cart, outputs.frac, outputs.lengths, outputs.angles):
            assert torch.all(torch.isfinite(tensor.grad))
        assert torch.all(outputs.frac.grad[molecule.bool()] == 0)
        assert torch.all(outputs.cart.grad[material.bool()] == 0)

    def test_shape_mismatch_is_a_domain_mismatch(self, batch):
        outputs = _perfect_outputs(batch)
        outputs.cart = outputs.cart[:, :1]
        with pytest.raises(DomainMismatch):
            total_training_loss(outputs, batch)


class TestBatch:

    def test_copy_count(self, mixed_systems):
        batch = build_training_batch(mixed_systems, copies=8, num_atom_types=TOY_ATOM_TYPES)
        assert len(batch) == 32
        assert len(batch.states) == 32
        assert batch.atom_mask.shape == (32, 4)

    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            build_training_batch([], copies=2)

    def test_molecule_slots_are_zero(self, mixed_systems):
        batch = build_training_batch(mixed_systems, copies=2, num_atom_types=TOY_ATOM_TYPES)
        molecule, material = batch.domain_indicators()
        assert torch.all(batch.noisy.frac[molecule.bool()] == 0)
        assert torch.all(batch.noisy.lengths[molecule.bool()] == 0)
        assert torch.all(batch.noisy.cart[material.bool()] == 0)

    def test_times_follow_beta(self, mixed_systems):
        batch = build_training_batch(mixed_systems, copies=64, seed=9, num_atom_types=TOY_ATOM_TYPES,
                                     dtype=torch.float64)
        t = batch.t.numpy()
        assert stats.kstest(t, lambda x: np.clip(x, 0, 1) ** 1.8).pvalue > 1e-4

    def test_copies_are_isometric(self):
        systems = [make_ammonia(), make_triclinic()]
        batch = build_training_batch(systems, copies=4, seed=5, num_atom_types=TOY_ATOM_TYPES)
        for state in batch.states:
            if state.system.is_periodic:
                original = np.sort(periodic_distance_matrix(systems[1].frac_coords, systems[1].lattice).ravel())
                copy = np.sort(periodic_distance_matrix(state.system.frac_coords, state.system.lattice).ravel())
            else:
                original = pairwise_distances(systems[0].cart_coords)
                copy = pairwise_distances(state.system.cart_coords)
            np.testing.assert_allclose(copy, original, atol=1e-9)

    def test_copies_get_different_times(self, water):
        batch = build_training_batch([water], copies=8, seed=1, num_atom_types=TOY_ATOM_TYPES)
        assert len(set(batch.t.tolist())) == 8

    def test_same_seed_same_batch(self, mixed_systems):
        first = build_training_batch(mixed_systems, copies=3, seed=7, step=2, num_atom_types=TOY_ATOM_TYPES)
        second = build_training_batch(mixed_systems, copies=3, seed=7, step=2, num_atom_types=TOY_ATOM_TYPES,
                                      num_workers=2)
        assert torch.equal(first.t, second.t)
        assert torch.equal(first.noisy.cart, second.noisy.cart)
        assert torch.equal(first.noisy.frac, second.noisy.frac)
        assert torch.equal(first.noisy.atom_types, second.noisy.atom_types)

    def test_time_function_override(self, water):
        batch = build_training_batch([water], copies=2, time_fn=lambda g: 1.0, num_atom_types=TOY_ATOM_TYPES,
                                     augment=False, dtype=torch.float64)
        clean = clean_modalities(water, TOY_ATOM_TYPES)
        assert torch.equal(batch.noisy.cart[0], clean.cart)
        assert torch.equal(batch.noisy.atom_types[0], clean.atom_types)

    def test_vocabulary_bound(self, cscl):
        with pytest.raises(RangeError):
            build_training_batch([cscl], copies=1, num_atom_types=10)


class TestGradients:

    def test_model_gradients_match_finite_differences(self):
        model = build_model(tiny_config()).double()
        randomize_parameters(model, seed=5)
        model.eval()
        batch = build_training_batch([make_water(), make_cscl()], copies=1, seed=3,
                                     num_atom_types=TOY_ATOM_TYPES, dtype=torch.float64)

        def objective(cart, frac, lengths):
            noisy = dataclasses.replace(batch.noisy, cart=cart, frac=frac, lengths=lengths)
            fed = dataclasses.replace(batch, noisy=noisy)
            out = model(fed, aux_heads=AUX_HEADS)
            loss, _ = total_training_loss(out.denoise, fed)
            return loss + out.aux.props.sum() + out.aux.energy.sum() + out.aux.forces.sum()

        inputs = tuple(t.clone().requires_grad_(True)
                       for t in (batch.noisy.cart, batch.noisy.frac, batch.noisy.lengths))
        assert torch.autograd.gradcheck(objective, inputs, eps=1e-6, atol=1e-5, rtol=1e-3)

    def test_parameter_gradients_of_weighted_loss(self):
        model = build_model(tiny_config()).double()
        randomize_parameters(model, seed=7)
        model.eval()
        batch = build_training_batch([make_water(), make_ammonia(), make_triclinic()], copies=1, seed=4,
                                     num_atom_types=TOY_ATOM_TYPES, dtype=torch.float64)

        def objective():
            loss, _ = total_training_loss(model(batch).denoise, batch)
            return loss

        numeric, analytic = finite_difference_pairs(model, objective, fraction=0.02, seed=1)
        assert len(numeric) > 0
        torch.testing.assert_close(analytic, numeric, rtol=1e-4, atol=1e-7)
