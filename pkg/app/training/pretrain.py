import math
import os
from typing import Any, Dict, List, Optional, Sequence

import torch
from tqdm import tqdm

from ..checkpoint import encode_histogram, save_checkpoint
from ..core import AtomicSystem, DomainClass
from ..errors import EmptyInput, NonFiniteActivation, UnsupportedDomain
from ..file_manager import DatasetFileManager
from ..flow.batch import build_training_batch
from ..flow.losses import LossWeights, total_training_loss
from ..logger import get_logger
from ..metrics.report import evaluate
from ..models.registry import build_model
from ..sampler.generate import generate
from ..sampler.schedule import SampleRequest, SampleSchedule
from ..schemas import TrainConfig
from ..utils import derive_seed, numpy_stream, reproducibility_stamp, torch_stream
from .ema import EMA

logger = get_logger(__name__)

BEST, LAST = "best", "last"


def check_variant_domains(variant: str, systems: Sequence[AtomicSystem]):
    """The equivariant variant only handles molecules"""
    if variant == "tfp":
        materials = [s.id for s in systems if s.is_periodic]
        if materials:
            raise UnsupportedDomain(f"Variant 'tfp' cannot train on materials ({len(materials)} found, "
                                    f"first: {materials[0]!r})")


class Trainer:
    """Stage-1 flow pretraining: AdamW, EMA, periodic validation and best/last checkpoints"""

    def __init__(self, config: TrainConfig, out_dir: str,
                 train_set: Optional[List[AtomicSystem]] = None, val_set: Optional[List[AtomicSystem]] = None):
        self.config = config
        self.out_dir = out_dir
        self.train_set = train_set if train_set is not None else DatasetFileManager.read_dataset(config.train_path)
        if val_set is None:
            val_set = DatasetFileManager.read_dataset(config.val_path) if config.val_path else []
        self.val_set = val_set
        if not self.train_set:
            raise EmptyInput(f"Training set {config.train_path} is empty")
        check_variant_domains(config.model.variant, self.train_set + self.val_set)

        with torch.random.fork_rng():
            torch.manual_seed(derive_seed(config.seed, "init"))
            self.model = build_model(config.model)
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=config.lr,
                                           weight_decay=config.weight_decay)
        self.ema = EMA(self.model, decay=config.ema_decay)
        self.weights = LossWeights(lambda_discrete=config.lambda_discrete, alpha_t=config.alpha_t)
        self.histogram = DatasetFileManager.atom_count_histogram(self.train_set)
        self.stamp = reproducibility_stamp(config.model_dump(), config.seed)
        self.best_val_loss = math.inf
        self.history: List[Dict[str, Any]] = []

    @property
    def domains(self) -> List[DomainClass]:
        return [d for d in DomainClass if d.value in self.histogram]

    def select_systems(self, step: int) -> List[AtomicSystem]:
        rng = numpy_stream(self.config.seed, "batch", step)
        size = min(self.config.batch_size, len(self.train_set))
        return [self.train_set[i] for i in rng.permutation(len(self.train_set))[:size]]

    def train_step(self, step: int) -> Dict[str, float]:
        config = self.config
        self.model.train()
        batch = build_training_batch(
            self.select_systems(step), copies=config.copies, seed=config.seed, step=step,
            alpha_t=config.alpha_t, num_atom_types=config.model.num_atom_types, num_workers=config.num_workers,
        )
        outputs = self.model(batch, generator=torch_stream(config.seed, "class", step))
        loss, breakdown = total_training_loss(outputs.denoise, batch, self.weights)
        if not torch.isfinite(loss):
            raise NonFiniteActivation("training loss", step)

        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip is not None:
            breakdown["grad_norm"] = float(torch.nn.utils.clip_grad_norm_(self.model.parameters(), config.grad_clip))
        self.optimizer.step()
        self.ema.update()
        return breakdown

    @torch.no_grad()
    def validation_loss(self) -> float:
        """β-weighted loss under EMA weights on a fixed noising of the validation split"""
        systems = self.val_set or self.train_set
        config = self.config
        seed = derive_seed(config.seed, "validation")
        total, count = 0.0, 0
        with self.ema.averaged() as model:
            model.eval()
            for start in range(0, len(systems), config.batch_size):
                chunk = systems[start: start + config.batch_size]
                batch = build_training_batch(chunk, copies=1, seed=seed, step=start, alpha_t=config.alpha_t,
                                             num_atom_types=config.model.num_atom_types)
                loss, _ = total_training_loss(model(batch).denoise, batch, self.weights)
                total += float(loss) * len(batch)
                count += len(batch)
            model.train()
        return total / count

    def validation_samples(self, step: int) -> Dict[str, Any]:
        """Sample with EMA weights and score each domain the model can generate"""
        config = self.config
        if config.val_samples == 0:
            return {}
        metrics = {}
        with self.ema.averaged() as model:
            for domain in self.domains:
                request = SampleRequest(
                    domain=domain,
                    num_samples=config.val_samples,
                    schedule=SampleSchedule(num_steps=config.sample_steps, seed=derive_seed(config.seed, "val", step)),
                    atom_count_histogram=self.histogram[domain.value],
                )
                result = generate(model, request)
                if not result.systems:
                    metrics[domain.value] = {"failed": len(result.failures)}
                    continue
                report = evaluate(result.systems)
                summary = report.materials if domain is DomainClass.MATERIAL else report.molecules
                metrics[domain.value] = {
                    "uniqueness_rate": report.uniqueness_rate,
                    "failed": len(result.failures),
                    **summary.model_dump(),
                }
        return metrics

    def metadata(self, step: int, val_loss: Optional[float] = None) -> Dict[str, Any]:
        return {
            "stage": "pretrain",
            "atom_count_histogram": encode_histogram(self.histogram),
            "property_stats": None,
            "stamp": self.stamp,
            "val_loss": val_loss,
            "history": self.history,
        }

    def save(self, name: str, step: int, val_loss: Optional[float] = None) -> str:
        return save_checkpoint(
            os.path.join(self.out_dir, name), self.model, step=step, ema_state=self.ema.state_dict(),
            run_config=self.config.model_dump(), metadata=self.metadata(step, val_loss),
        )

    def validate(self, step: int) -> float:
        val_loss = self.validation_loss()
        sampled = self.validation_samples(step)
        self.history.append({"step": step, "val_loss": val_loss, "sampling": sampled})
        logger.info(f"🔍 验证 step={step}: val_loss={val_loss:.5f} 采样={sampled}")
        if val_loss < self.best_val_loss:
            self.best_val_loss = val_loss
            self.save(BEST, step, val_loss)
            logger.info(f"🏆 新的最佳检查点: step={step}, val_loss={val_loss:.5f}")
        return val_loss

    def run(self, progress: bool = False) -> Dict[str, Any]:
        config = self.config
        logger.info(f"🚀 开始预训练: {len(self.train_set)} 个训练体系, {len(self.val_set)} 个验证体系, "
                    f"{config.max_steps} 步")
        bar = tqdm(range(1, config.max_steps + 1), desc="pretrain", disable=not progress)
        for step in bar:
            breakdown = self.train_step(step)
            bar.set_postfix(loss=f"{breakdown['loss']:.4f}")
            if step % config.log_every == 0:
                terms = ", ".join(f"{k}={v:.4f}" for k, v in breakdown.items())
                logger.info(f"📈 step={step}: {terms}")
            if step % config.val_every == 0 or step == config.max_steps:
                self.validate(step)

        self.save(LAST, config.max_steps, self.history[-1]["val_loss"] if self.history else None)
        logger.info(f"✅ 预训练完成: 最佳 val_loss={self.best_val_loss:.5f}")
        return {"steps": config.max_steps, "best_val_loss": self.best_val_loss,
                "best": os.path.join(self.out_dir, BEST), "last": os.path.join(self.out_dir, LAST)}
