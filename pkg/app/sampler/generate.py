from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import torch
from tqdm import tqdm

from ..core import AtomicSystem, DomainClass, build_system, denormalize_lattice, wrap_frac, zero_center
from ..errors import AtomFlowError, NonFiniteActivation
from ..flow.batch import FlowBatch, Modalities, active_modalities, collate_modalities
from ..logger import get_logger
from ..utils import numpy_stream, torch_stream
from .schedule import SampleRequest
from .steps import discrete_flow_step, euclidean_step

logger = get_logger(__name__)

MIN_LENGTH = 1e-3
MIN_ANGLE, MAX_ANGLE = 60.0, 120.0


@dataclass
class GenerationResult:
    systems: List[AtomicSystem]
    records: List[Dict[str, Any]]
    trajectory: Optional[List[Modalities]] = field(default=None, repr=False)

    @property
    def failures(self) -> List[Dict[str, Any]]:
        return [r for r in self.records if r["failed"]]

    @property
    def clamped(self) -> List[Dict[str, Any]]:
        return [r for r in self.records if r.get("clamped_angles")]


def resolve_atom_counts(request: SampleRequest) -> List[int]:
    """Explicit N, or one draw per sample from the empirical histogram"""
    if request.num_atoms is not None:
        return [request.num_atoms] * request.num_samples
    sizes = np.array(sorted(request.atom_count_histogram), dtype=np.int64)
    counts = np.array([request.atom_count_histogram[n] for n in sizes], dtype=np.float64)
    weights = counts / counts.sum()
    seed = request.schedule.seed
    return [int(numpy_stream(seed, "num_atoms", i).choice(sizes, p=weights)) for i in range(request.num_samples)]


def init_noise(request: SampleRequest, num_atom_types: int, dtype=torch.float32) -> FlowBatch:
    """State at t = 0: uniform atom types, standard normal active modalities"""
    seed = request.schedule.seed
    sizes = resolve_atom_counts(request)
    items = []
    for index, n in enumerate(sizes):
        generator = torch_stream(seed, "init", index)
        noisy = Modalities(atom_types=torch.randint(0, num_atom_types, (n,), generator=generator))
        for name in active_modalities(request.domain):
            shape = (n, 3) if name in ("cart", "frac") else (3,)
            setattr(noisy, name, torch.randn(shape, generator=generator, dtype=torch.float64))
        items.append(noisy)

    max_atoms = max(sizes)
    atom_mask = torch.zeros((len(sizes), max_atoms), dtype=torch.bool)
    for i, n in enumerate(sizes):
        atom_mask[i, :n] = True
    return FlowBatch(
        ids=[f"sample-{i:05d}" for i in range(len(sizes))],
        domain=torch.full((len(sizes),), request.domain.index, dtype=torch.long),
        t=torch.zeros(len(sizes), dtype=dtype),
        atom_mask=atom_mask,
        noisy=collate_modalities(items, max_atoms, dtype),
    )


def _step_sample(batch: FlowBatch, pred, probs: torch.Tensor, index: int, step: int, t: float, dt: float,
                 request: SampleRequest):
    schedule = request.schedule
    n = int(batch.atom_mask[index].sum())
    noisy = batch.noisy
    generator = torch_stream(schedule.seed, "sample", index, step, "atom_types")
    noisy.atom_types[index, :n] = discrete_flow_step(noisy.atom_types[index, :n], probs[index, :n], t, dt, generator)
    for name in active_modalities(request.domain):
        generator = torch_stream(schedule.seed, "sample", index, step, name)
        state, target = noisy.get(name)[index], getattr(pred, name)[index]
        if name in ("cart", "frac"):
            state, target = state[:n], target[:n]
        updated = euclidean_step(state, target.to(state.dtype), t, dt, schedule.gamma_for(name), schedule.g, generator)
        if not torch.isfinite(updated).all():
            raise NonFiniteActivation(f"{name} state", step)
        if name in ("cart", "frac"):
            noisy.get(name)[index, :n] = updated
        else:
            noisy.get(name)[index] = updated


def _snapshot(noisy: Modalities) -> Modalities:
    return Modalities(atom_types=noisy.atom_types.clone(), cart=noisy.cart.clone(), frac=noisy.frac.clone(),
                      lengths=noisy.lengths.clone(), angles=noisy.angles.clone())


def _clear_sample(batch: FlowBatch, index: int):
    for name in ("cart", "frac", "lengths", "angles"):
        batch.noisy.get(name)[index] = 0


def decode_sample(batch: FlowBatch, index: int, domain: DomainClass):
    """Turn one final state into an AtomicSystem plus its decode flags"""
    n = int(batch.atom_mask[index].sum())
    noisy = batch.noisy
    numbers = noisy.atom_types[index, :n].numpy() + 1
    sample_id = batch.ids[index]
    if domain is DomainClass.MOLECULE:
        cart = zero_center(noisy.cart[index, :n].double().numpy())
        return build_system(sample_id, domain, numbers, cart_coords=cart), {"clamped_angles": False}

    lengths, angles = denormalize_lattice(noisy.lengths[index].double().numpy(),
                                          noisy.angles[index].double().numpy(), n)
    lengths = np.maximum(np.abs(lengths), MIN_LENGTH)
    clamped = bool(np.any(angles < MIN_ANGLE) or np.any(angles > MAX_ANGLE))
    angles = np.clip(angles, MIN_ANGLE, MAX_ANGLE)
    frac = wrap_frac(noisy.frac[index, :n].double().numpy())
    system = build_system(sample_id, domain, numbers, frac_coords=frac,
                          lattice_lengths=lengths, lattice_angles=angles)
    return system, {"clamped_angles": clamped}


def generate(model, request: SampleRequest, num_atom_types: Optional[int] = None, dtype=None,
             keep_trajectory: bool = False, progress: bool = False) -> GenerationResult:
    """Integrate from noise to samples with one Euler step per modality per grid interval.

    ``model`` is anything with ``predict_endpoints(batch)``. The model sees
    the state time t_{i-1}, and each sample draws from its own keyed streams,
    so a failing sample is dropped without disturbing the others.
    """
    if num_atom_types is None:
        num_atom_types = model.config.num_atom_types
    if dtype is None:
        dtype = next(model.parameters()).dtype if hasattr(model, "parameters") else torch.get_default_dtype()

    batch = init_noise(request, num_atom_types, dtype)
    size = len(batch)
    grid = request.schedule.time_grid.tolist()
    errors: Dict[int, str] = {}
    trajectory = [_snapshot(batch.noisy)] if keep_trajectory else None

    steps = range(1, len(grid))
    for step in tqdm(steps, desc="sampling", disable=not progress):
        t, dt = grid[step - 1], grid[step] - grid[step - 1]
        batch.t = torch.full((size,), t, dtype=dtype)
        pred = model.predict_endpoints(batch)
        probs = torch.softmax(pred.atom_logits.to(torch.float64), dim=-1)
        for index in range(size):
            if index in errors:
                continue
            try:
                _step_sample(batch, pred, probs, index, step, t, dt, request)
            except AtomFlowError as e:
                errors[index] = str(e)
                _clear_sample(batch, index)
                logger.warning(f"⚠️ 样本 {batch.ids[index]} 在第 {step} 步失败: {e}")
        if keep_trajectory:
            trajectory.append(_snapshot(batch.noisy))

    systems, records = [], []
    for index in range(size):
        record = {"index": index, "id": batch.ids[index], "num_atoms": int(batch.atom_mask[index].sum()),
                  "clamped_angles": False, "failed": index in errors, "error": errors.get(index)}
        if index not in errors:
            try:
                system, flags = decode_sample(batch, index, request.domain)
                systems.append(system)
                record.update(flags)
            except AtomFlowError as e:
                record.update(failed=True, error=str(e))
                logger.warning(f"⚠️ 样本 {batch.ids[index]} 解码失败: {e}")
        records.append(record)

    failed = sum(r["failed"] for r in records)
    logger.info(f"🎲 采样完成: {len(systems)}/{size} 成功, {failed} 失败")
    return GenerationResult(systems=systems, records=records, trajectory=trajectory)
