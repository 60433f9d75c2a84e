import math
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from ..checkpoint import load_checkpoint, save_checkpoint
from ..config import Config
from ..core import AtomicSystem
from ..errors import AllMasked, EmptyInput, NonFiniteActivation, ShapeError, TapOutOfRange
from ..file_manager import DatasetFileManager
from ..flow.batch import FlowBatch, build_training_batch
from ..flow.interpolants import sample_time
from ..logger import get_logger
from ..models.base import BaseDenoiser
from ..schemas import FinetuneConfig
from ..utils import derive_seed, numpy_stream, reproducibility_stamp

logger = get_logger(__name__)

BEST = "best"
STD_FLOOR = 1e-8


def freeze_and_bind(model: BaseDenoiser, config: FinetuneConfig) -> List[nn.Parameter]:
    """Freeze everything up to the denoising heads and unfreeze the task's aux stacks.

    The model is put in eval mode with only the aux stacks training, so no
    class-label dropout is applied to the frozen embedding.
    """
    num_layers = model.config.num_trunk_layers
    tap_layer = config.tap_layer if config.tap_layer is not None else model.tap_layer
    if not 1 <= tap_layer <= num_layers:
        raise TapOutOfRange(f"Tap layer {tap_layer} outside the {num_layers}-layer trunk")
    modules = model.aux_modules(config.aux_heads)
    model.set_tap_layer(tap_layer)

    for param in model.parameters():
        param.requires_grad_(False)
    trainable = []
    for module in modules:
        for param in module.parameters():
            param.requires_grad_(True)
            trainable.append(param)

    model.eval()
    for module in modules:
        module.train()
    logger.info(f"🧊 冻结主干: 可训练 {sum(p.numel() for p in trainable):,} / {model.parameter_count():,} 个参数, "
                f"tap={tap_layer}/{num_layers}")
    return trainable


def finetune_time(generator: torch.Generator, config: FinetuneConfig) -> float:
    """Nearly (or fully) clean inputs: max(Beta(alpha_t, 1) draw, t_floor)"""
    return max(sample_time(generator, config.alpha_t), config.t_floor)


@dataclass
class PropertyStats:
    """Per-target standardization computed on the training split"""
    mean: np.ndarray
    std: np.ndarray

    def standardize(self, values: torch.Tensor) -> torch.Tensor:
        mean = torch.as_tensor(self.mean, dtype=values.dtype)
        std = torch.as_tensor(self.std, dtype=values.dtype)
        return (values - mean) / std

    def destandardize(self, values: torch.Tensor) -> torch.Tensor:
        mean = torch.as_tensor(self.mean, dtype=values.dtype)
        std = torch.as_tensor(self.std, dtype=values.dtype)
        return values * std + mean

    def to_json(self) -> Dict[str, List[float]]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, payload: Dict[str, List[float]]) -> "PropertyStats":
        return cls(mean=np.asarray(payload["mean"], dtype=np.float64), std=np.asarray(payload["std"], dtype=np.float64))


def compute_property_stats(systems: Sequence[AtomicSystem], num_properties: int = Config.NUM_PROPERTIES) -> PropertyStats:
    """Mean and standard deviation per target over the labels present.

    Targets with no labels get (0, 1); a constant target keeps std 1.
    """
    values = np.full((len(systems), num_properties), np.nan)
    for i, system in enumerate(systems):
        if system.labels.properties is not None:
            values[i] = system.labels.properties
    present = ~np.isnan(values)
    counts = present.sum(axis=0)
    filled = np.where(present, values, 0.0)
    mean = np.divide(filled.sum(axis=0), counts, out=np.zeros(num_properties), where=counts > 0)
    sq = np.where(present, (values - mean) ** 2, 0.0).sum(axis=0)
    std = np.sqrt(np.divide(sq, counts, out=np.zeros(num_properties), where=counts > 0))
    std = np.where(std > STD_FLOOR, std, 1.0)
    return PropertyStats(mean=mean, std=std)


def property_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over the unmasked entries"""
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ShapeError(f"Property shapes differ: pred {tuple(pred.shape)}, target {tuple(target.shape)}, "
                         f"mask {tuple(mask.shape)}")
    weights = mask.to(pred.dtype)
    count = weights.sum()
    if count == 0:
        raise AllMasked("Every property label in the batch is masked")
    return ((pred - target).abs() * weights).sum() / count


def energy_force_loss(pred_e: torch.Tensor, target_e: torch.Tensor, pred_f: torch.Tensor, target_f: torch.Tensor,
                      lambda_forces: float = 5.0, atom_mask: Optional[torch.Tensor] = None,
                      energy_mask: Optional[torch.Tensor] = None,
                      forces_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """MSE(energy) + lambda_forces * mean over samples of (1/N) sum_i |F'_i - F_i|^2"""
    if pred_e.shape != target_e.shape:
        raise ShapeError(f"Energy shapes differ: {tuple(pred_e.shape)} vs {tuple(target_e.shape)}")
    if pred_f.shape != target_f.shape:
        raise ShapeError(f"Force shapes differ: {tuple(pred_f.shape)} vs {tuple(target_f.shape)}")
    batch, max_atoms = pred_f.shape[:2]
    if atom_mask is None:
        atom_mask = torch.ones((batch, max_atoms), dtype=torch.bool)
    if energy_mask is None:
        energy_mask = torch.ones(batch, dtype=torch.bool)
    if forces_mask is None:
        forces_mask = torch.ones(batch, dtype=torch.bool)
    if not bool(energy_mask.any()) and not bool(forces_mask.any()):
        raise AllMasked("No energy or force labels in the batch")

    loss = pred_e.new_zeros(())
    if bool(energy_mask.any()):
        loss = loss + ((pred_e - target_e) ** 2)[energy_mask].mean()
    if bool(forces_mask.any()):
        atoms = atom_mask.to(pred_f.dtype)
        per_atom = ((pred_f - target_f) ** 2).sum(dim=-1) * atoms
        per_sample = per_atom.sum(dim=1) / atoms.sum(dim=1).clamp_min(1.0)
        loss = loss + lambda_forces * per_sample[forces_mask].mean()
    return loss


def finetune_batch(systems: Sequence[AtomicSystem], config: FinetuneConfig, num_atom_types: int, seed: int,
                   step: int, augment: bool = True) -> FlowBatch:
    return build_training_batch(systems, copies=config.copies, seed=seed, step=step, alpha_t=config.alpha_t,
                                num_atom_types=num_atom_types, time_fn=lambda g: finetune_time(g, config),
                                augment=augment)


def task_loss(model: BaseDenoiser, batch: FlowBatch, config: FinetuneConfig,
              stats: Optional[PropertyStats] = None):
    """Task objective and the aux predictions it was computed from"""
    dtype = batch.dtype
    labels = batch.labels
    aux = model(batch, aux_heads=config.aux_heads, denoise=False).aux
    if config.task == "properties":
        target = stats.standardize(labels.properties.to(dtype))
        return property_loss(aux.props, target, labels.properties_mask), aux
    loss = energy_force_loss(aux.energy, labels.energy.to(dtype), aux.forces, labels.forces.to(dtype),
                             config.lambda_forces, batch.atom_mask, labels.energy_mask, labels.forces_mask)
    return loss, aux


@torch.no_grad()
def validation_metrics(model: BaseDenoiser, systems: Sequence[AtomicSystem], config: FinetuneConfig,
                       stats: Optional[PropertyStats] = None) -> Dict[str, Any]:
    """MAE on a fixed, unaugmented noising of ``systems``.

    Properties report per-target MAE in original units plus the mean
    standardized MAE (the selection metric ``score``).
    """
    if not systems:
        raise EmptyInput("No systems to validate on")
    seed = derive_seed(config.seed, "validation")
    num_atom_types = model.config.num_atom_types
    modes = [(module, module.training) for module in model.modules()]
    model.eval()

    abs_sum = np.zeros(model.config.num_properties)
    std_abs_sum = np.zeros(model.config.num_properties)
    label_count = np.zeros(model.config.num_properties)
    energy_abs, energy_n, force_abs, force_n, loss_sum, loss_n = 0.0, 0, 0.0, 0, 0.0, 0
    try:
        for start in range(0, len(systems), config.batch_size):
            batch = finetune_batch(systems[start: start + config.batch_size], config, num_atom_types,
                                   seed, start, augment=False)
            labels = batch.labels
            aux = model(batch, aux_heads=config.aux_heads, denoise=False).aux
            if config.task == "properties":
                mask = labels.properties_mask.numpy()
                pred_std = aux.props.double()
                target = labels.properties.double()
                pred = stats.destandardize(pred_std).numpy()
                target_std = stats.standardize(target).numpy()
                abs_sum += np.where(mask, np.abs(pred - target.numpy()), 0.0).sum(axis=0)
                std_abs_sum += np.where(mask, np.abs(pred_std.numpy() - target_std), 0.0).sum(axis=0)
                label_count += mask.sum(axis=0)
            else:
                e_mask = labels.energy_mask
                energy_abs += float((aux.energy.double() - labels.energy.double()).abs()[e_mask].sum())
                energy_n += int(e_mask.sum())
                atoms = batch.atom_mask & labels.forces_mask[:, None]
                force_err = (aux.forces.double() - labels.forces.double()).abs()
                force_abs += float(force_err[atoms].sum())
                force_n += int(atoms.sum()) * 3
                loss = energy_force_loss(aux.energy, labels.energy.to(batch.dtype), aux.forces,
                                         labels.forces.to(batch.dtype), config.lambda_forces, batch.atom_mask,
                                         e_mask, labels.forces_mask)
                loss_sum += float(loss) * len(batch)
                loss_n += len(batch)
    finally:
        for module, training in modes:
            module.training = training

    if config.task == "properties":
        if label_count.sum() == 0:
            raise AllMasked("Validation systems carry no property labels")
        per_target = [float(a / c) if c else None for a, c in zip(abs_sum, label_count)]
        return {"per_target_mae": per_target, "score": float(std_abs_sum.sum() / label_count.sum())}
    return {
        "energy_mae": energy_abs / energy_n if energy_n else None,
        "forces_mae": force_abs / force_n if force_n else None,
        "score": loss_sum / loss_n,
    }


class Finetuner:
    """Stage-2 training of one task's aux stack on top of a frozen pretrained trunk"""

    def __init__(self, config: FinetuneConfig, checkpoint_dir: str, out_dir: str,
                 train_set: Optional[List[AtomicSystem]] = None, val_set: Optional[List[AtomicSystem]] = None):
        self.config = config
        self.checkpoint_dir = checkpoint_dir
        self.out_dir = out_dir
        self.train_set = train_set if train_set is not None else DatasetFileManager.read_dataset(config.train_path)
        if val_set is None:
            val_set = DatasetFileManager.read_dataset(config.val_path) if config.val_path else []
        self.val_set = val_set
        if not self.train_set:
            raise EmptyInput(f"Finetuning set {config.train_path} is empty")

        loaded = load_checkpoint(checkpoint_dir)
        self.model = loaded.model
        self.source_metadata = loaded.metadata
        self.stats = None
        if config.task == "properties":
            self.stats = compute_property_stats(self.train_set, self.model.config.num_properties)
        self.trainable = freeze_and_bind(self.model, config)
        self.optimizer = torch.optim.AdamW(self.trainable, lr=config.lr, weight_decay=config.weight_decay)
        self.stamp = reproducibility_stamp(config.model_dump(), config.seed)
        self.best_score = math.inf
        self.history: List[Dict[str, Any]] = []

    def select_systems(self, step: int) -> List[AtomicSystem]:
        rng = numpy_stream(self.config.seed, "finetune-batch", step)
        size = min(self.config.batch_size, len(self.train_set))
        return [self.train_set[i] for i in rng.permutation(len(self.train_set))[:size]]

    def train_step(self, step: int) -> float:
        config = self.config
        batch = finetune_batch(self.select_systems(step), config, self.model.config.num_atom_types,
                               config.seed, step)
        loss, _ = task_loss(self.model, batch, config, self.stats)
        if not torch.isfinite(loss):
            raise NonFiniteActivation("finetune loss", step)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        return float(loss)

    def save(self, step: int, metrics: Dict[str, Any]) -> str:
        metadata = {
            **self.source_metadata,
            "stage": "finetune",
            "task": self.config.task,
            "property_stats": self.stats.to_json() if self.stats is not None else None,
            "stamp": self.stamp,
            "val_metrics": metrics,
            "history": self.history,
        }
        run_config = {"finetune": self.config.model_dump(), "source_checkpoint": self.checkpoint_dir}
        return save_checkpoint(os.path.join(self.out_dir, BEST), self.model, step=step,
                               run_config=run_config, metadata=metadata)

    def validate(self, step: int) -> Dict[str, Any]:
        metrics = validation_metrics(self.model, self.val_set or self.train_set, self.config, self.stats)
        self.history.append({"step": step, **metrics})
        logger.info(f"🔍 微调验证 step={step}: {metrics}")
        if metrics["score"] < self.best_score:
            self.best_score = metrics["score"]
            self.save(step, metrics)
        return metrics

    def run(self, progress: bool = False) -> Dict[str, Any]:
        config = self.config
        logger.info(f"🚀 开始微调 ({config.task}): {len(self.train_set)} 个训练体系, {config.max_steps} 步")
        bar = tqdm(range(1, config.max_steps + 1), desc=f"finetune-{config.task}", disable=not progress)
        for step in bar:
            loss = self.train_step(step)
            bar.set_postfix(loss=f"{loss:.4f}")
            if step % config.log_every == 0:
                logger.info(f"📈 微调 step={step}: loss={loss:.5f}")
            if step % config.val_every == 0 or step == config.max_steps:
                self.validate(step)
        logger.info(f"✅ 微调完成: 最佳 score={self.best_score:.5f}")
        return {"steps": config.max_steps, "best_score": self.best_score, "best": os.path.join(self.out_dir, BEST)}
