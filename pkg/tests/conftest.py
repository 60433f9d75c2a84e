import os

# Keep test runs off the rotating log file and in the serial deterministic mode
os.environ["LOG_FILE"] = ""
os.environ["FLOW_DETERMINISTIC"] = "1"

import numpy as np
import pytest
import torch

from app.core import build_system
from app.schemas import TftConfig

TOY_ATOM_TYPES = 20
NUM_PROPERTIES = 19


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the minutes-long convergence tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains a model to convergence, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_config(**overrides) -> TftConfig:
    fields = dict(d_model=16, num_trunk_layers=2, num_heads=2, num_aux_layers=1,
                  num_atom_types=TOY_ATOM_TYPES, time_embed_dim=8)
    fields.update(overrides)
    return TftConfig(**fields)


def make_water(id="water", properties=None, energy=None, forces=None):
    return build_system(id, "molecule", [8, 1, 1],
                        cart_coords=[[0.0, 0.0, 0.0], [0.9572, 0.0, 0.0], [-0.2399872, 0.9266272, 0.0]],
                        properties=properties, energy=energy, forces=forces)


def make_ammonia(id="ammonia"):
    return build_system(id, "molecule", [7, 1, 1, 1],
                        cart_coords=[[0.0, 0.0, 0.1162], [0.0, 0.9397, -0.2711],
                                     [0.8138, -0.4699, -0.2711], [-0.8138, -0.4699, -0.2711]])


def make_hydrogen(id="h2", bond=0.74):
    return build_system(id, "molecule", [1, 1], cart_coords=[[0.0, 0.0, 0.0], [bond, 0.0, 0.0]])


def make_cscl(id="cscl", a=3.0):
    """Two-atom cubic cell; the shortest distance is a·√3/2"""
    return build_system(id, "material", [11, 17], frac_coords=[[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]],
                        lattice_lengths=[a, a, a], lattice_angles=[90.0, 90.0, 90.0])


def make_triclinic(id="tri"):
    return build_system(id, "material", [3, 8, 8],
                        frac_coords=[[0.1, 0.2, 0.3], [0.6, 0.4, 0.75], [0.35, 0.9, 0.05]],
                        lattice_lengths=[3.1, 4.2, 5.3], lattice_angles=[70.0, 80.0, 95.0])


def labeled(system, rng: np.random.Generator, missing=()):
    properties = rng.normal(size=NUM_PROPERTIES)
    properties[list(missing)] = np.nan
    forces = rng.normal(size=(system.num_atoms, 3))
    return system.replace(properties=properties, energy=float(rng.normal()), forces=forces)


@pytest.fixture
def water():
    return make_water()


@pytest.fixture
def cscl():
    return make_cscl()


@pytest.fixture
def mixed_systems():
    return [make_water(), make_ammonia(), make_cscl(), make_triclinic()]


@pytest.fixture
def molecules():
    return [make_water(), make_ammonia(), make_hydrogen()]


@pytest.fixture
def labeled_systems():
    rng = np.random.default_rng(11)
    base = [make_water("w"), make_ammonia("a"), make_cscl("c"), make_triclinic("t")]
    return [labeled(s.replace(id=f"{s.id}-{i}"), rng, missing=(i % 3,)) for i in range(4) for s in base]


@pytest.fixture
def tiny_model_config():
    return tiny_config()


def randomize_parameters(model: torch.nn.Module, seed: int = 0, std: float = 0.3):
    """Overwrite every parameter (zero-initialized heads included) with Gaussian values"""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in model.parameters():
            param.copy_(torch.randn(param.shape, generator=generator, dtype=param.dtype) * std)


def finite_difference_pairs(model: torch.nn.Module, objective, fraction: float = 0.02,
                            eps: float = 1e-6, seed: int = 0):
    """Analytic vs central-difference gradients on a random subset of parameter entries.

    Returns two float64 vectors (numeric, analytic); the model must be float64.
    """
    model.zero_grad(set_to_none=True)
    objective().backward()
    generator = torch.Generator().manual_seed(seed)
    numeric, analytic = [], []
    with torch.no_grad():
        for param in model.parameters():
            if param.grad is None:
                continue
            flat, grad = param.data.view(-1), param.grad.view(-1)
            count = max(1, int(fraction * flat.numel()))
            for index in torch.randperm(flat.numel(), generator=generator)[:count].tolist():
                original = flat[index].item()
                flat[index] = original + eps
                plus = float(objective())
                flat[index] = original - eps
                minus = float(objective())
                flat[index] = original
                numeric.append((plus - minus) / (2 * eps))
                analytic.append(float(grad[index]))
    return torch.tensor(numeric, dtype=torch.float64), torch.tensor(analytic, dtype=torch.float64)
