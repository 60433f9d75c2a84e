from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .config import Config


class TftConfig(BaseModel):
    """Architecture of the denoiser (both variants)"""
    model_config = ConfigDict(extra="forbid")

    variant: Literal["tft", "tfp"] = "tft"
    d_model: int = Field(512, gt=0)
    num_trunk_layers: int = Field(16, ge=1)
    num_heads: int = Field(8, ge=1)
    num_aux_layers: int = Field(4, ge=0)
    tap_layer: Optional[int] = None
    num_atom_types: int = Field(Config.MAX_ATOMIC_NUMBER, ge=2)
    class_dropout_prob: float = Field(0.1, ge=0.0, le=1.0)
    num_properties: int = Field(Config.NUM_PROPERTIES, ge=1)
    ffn_multiplier: int = Field(4, ge=1)
    time_embed_dim: int = Field(256, ge=2)

    # Equivariant variant only
    group: Literal["tetrahedral", "octahedral"] = "tetrahedral"
    channel_mode: Literal["compute", "parameter", "balanced"] = "balanced"

    @model_validator(mode="after")
    def _check_dims(self):
        if self.d_model % self.num_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.tap_layer is None:
            self.tap_layer = self.num_trunk_layers
        if not 1 <= self.tap_layer <= self.num_trunk_layers:
            raise ValueError(f"tap_layer must lie in [1, {self.num_trunk_layers}], got {self.tap_layer}")
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even")
        return self


class TrainConfig(BaseModel):
    """Stage-1 flow pretraining run"""
    model_config = ConfigDict(extra="forbid")

    model: TftConfig = Field(default_factory=TftConfig)
    train_path: str
    val_path: Optional[str] = None

    lambda_discrete: float = Field(0.1, ge=0.0, le=1.0)
    alpha_t: float = Field(1.8, gt=0.0)
    copies: int = Field(8, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    weight_decay: float = Field(0.0, ge=0.0)
    ema_decay: float = Field(0.999, ge=0.0, lt=1.0)
    grad_clip: Optional[float] = Field(None, gt=0.0)

    max_steps: int = Field(1000, ge=1)
    val_every: int = Field(100, ge=1)
    val_samples: int = Field(16, ge=0)
    sample_steps: int = Field(100, ge=1)
    log_every: int = Field(10, ge=1)

    seed: int = 0
    num_workers: int = Field(0, ge=0)


class FinetuneConfig(BaseModel):
    """Stage-2 predictive finetuning run"""
    model_config = ConfigDict(extra="forbid")

    task: Literal["properties", "energy_forces"] = "properties"
    train_path: str
    val_path: Optional[str] = None

    tap_layer: Optional[int] = None
    lambda_forces: float = Field(5.0, ge=0.0)
    t_floor: Optional[float] = Field(None, ge=0.0, le=1.0)
    alpha_t: float = Field(1.8, gt=0.0)
    copies: Optional[int] = Field(None, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    weight_decay: float = Field(0.0, ge=0.0)

    max_steps: int = Field(500, ge=1)
    val_every: int = Field(50, ge=1)
    log_every: int = Field(10, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _task_defaults(self):
        if self.t_floor is None:
            self.t_floor = 0.98 if self.task == "properties" else 1.0
        if self.copies is None:
            self.copies = 8 if self.task == "properties" else 1
        return self

    @property
    def aux_heads(self) -> List[str]:
        return ["props"] if self.task == "properties" else ["energy", "forces"]
