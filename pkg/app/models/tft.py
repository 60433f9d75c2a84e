from typing import List, Sequence

import torch
import torch.nn as nn

from ..flow.batch import FlowBatch
from ..schemas import TftConfig
from .base import AUX_HEADS, AuxOutput, BaseDenoiser, DenoiseOutput, TrunkOutput
from .layers import (
    DecoderBlock,
    TransformerEncoder,
    init_weights,
    masked_mean,
    sinusoidal_time_embedding,
    zero_linear,
)

DENOISE_STREAMS = ("atom_types", "cart", "frac", "lengths", "angles")


class LatticeHead(nn.Module):
    """Masked mean-pool, LayerNorm, bias-free projection to a 3-vector"""

    def __init__(self, d_model: int):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.out = nn.Linear(d_model, 3, bias=False)

    def forward(self, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.out(self.norm(masked_mean(h, mask)))


class CoordinateHead(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.out = nn.Linear(d_model, 3, bias=False)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.out(self.norm(h))


class AuxStack(nn.Module):
    """Input tokens cross-attend to the tap states, an M-layer encoder, then one output head"""

    def __init__(self, head: str, config: TftConfig):
        super().__init__()
        d = config.d_model
        self.head = head
        self.decoder = DecoderBlock(d, config.num_heads, config.ffn_multiplier)
        self.encoder = TransformerEncoder(config.num_aux_layers, d, config.num_heads, config.ffn_multiplier)
        if head == "props":
            self.out = nn.Linear(d, config.num_properties)
        elif head == "energy":
            self.out = nn.Linear(d, 1)
        else:
            self.out = nn.Linear(d, 3, bias=False)

    def forward(self, z_tap: torch.Tensor, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        states = self.decoder(h, z_tap, mask)
        states, _ = self.encoder(states, mask)
        if self.head == "forces":
            return self.out(states) * mask.unsqueeze(-1).to(states.dtype)
        pooled = self.out(masked_mean(states, mask))
        return pooled.squeeze(-1) if self.head == "energy" else pooled


class TrunkFlowTransformer(BaseDenoiser):
    """Transformer denoiser over the five unified modalities with auxiliary prediction heads"""

    variant = "tft"

    def __init__(self, config: TftConfig):
        super().__init__(config)
        d = config.d_model

        self.atom_embed = nn.Embedding(config.num_atom_types, d)
        self.class_embed = nn.Embedding(3, d)  # molecule, material, null
        self.time_proj = nn.Linear(config.time_embed_dim, d)
        self.cart_proj = nn.Linear(3, d, bias=False)
        self.frac_proj = nn.Linear(3, d, bias=False)
        self.lengths_proj = nn.Linear(3, d, bias=False)
        self.angles_proj = nn.Linear(3, d, bias=False)

        self.trunk = TransformerEncoder(config.num_trunk_layers, d, config.num_heads, config.ffn_multiplier)

        self.decoder = DecoderBlock(d, config.num_heads, config.ffn_multiplier)
        self.adapters = nn.ModuleDict({name: nn.Linear(d, d) for name in DENOISE_STREAMS})
        self.atom_head = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, config.num_atom_types))
        self.cart_head = CoordinateHead(d)
        self.frac_head = CoordinateHead(d)
        self.lengths_head = LatticeHead(d)
        self.angles_head = LatticeHead(d)

        self.aux = nn.ModuleDict({head: AuxStack(head, config) for head in AUX_HEADS})

        self.apply(init_weights)
        for layer in (self.atom_head[-1], self.cart_head.out, self.frac_head.out,
                      self.lengths_head.out, self.angles_head.out):
            zero_linear(layer)
        for stack in self.aux.values():
            zero_linear(stack.out)

    def embed_inputs(self, batch: FlowBatch, class_labels: torch.Tensor) -> torch.Tensor:
        noisy = batch.noisy
        molecule, material = batch.domain_indicators()
        atom_mask = batch.atom_mask.to(noisy.cart.dtype).unsqueeze(-1)

        cart = noisy.cart * molecule[:, None, None] * atom_mask
        frac = noisy.frac * material[:, None, None] * atom_mask
        lengths = noisy.lengths * material[:, None]
        angles = noisy.angles * material[:, None]

        h = self.atom_embed(noisy.atom_types)
        h = h + self.class_embed(class_labels)[:, None, :]
        h = h + self.time_proj(sinusoidal_time_embedding(batch.t, self.config.time_embed_dim))[:, None, :]
        h = h + self.cart_proj(cart) + self.frac_proj(frac)
        h = h + (self.lengths_proj(lengths) + self.angles_proj(angles))[:, None, :]
        return h

    def trunk_forward(self, h: torch.Tensor, atom_mask: torch.Tensor) -> TrunkOutput:
        z_final, z_tap = self.trunk(h, atom_mask, tap_layer=self.tap_layer)
        return TrunkOutput(z_final=z_final, z_tap=z_tap, input_embeddings=h, atom_mask=atom_mask)

    def denoise_decode(self, trunk: TrunkOutput) -> DenoiseOutput:
        mask = trunk.atom_mask
        shared = self.decoder(trunk.input_embeddings, trunk.z_final, mask)
        streams = {name: adapter(shared) for name, adapter in self.adapters.items()}
        return DenoiseOutput(
            atom_logits=self.atom_head(streams["atom_types"]),
            cart=self.cart_head(streams["cart"]),
            frac=self.frac_head(streams["frac"]),
            lengths=self.lengths_head(streams["lengths"], mask),
            angles=self.angles_head(streams["angles"], mask),
        )

    def aux_decode(self, trunk: TrunkOutput, heads: Sequence[str]) -> AuxOutput:
        out = AuxOutput()
        for head in heads:
            setattr(out, head, self.aux[head](trunk.z_tap, trunk.input_embeddings, trunk.atom_mask))
        return out

    def aux_modules(self, heads: Sequence[str]) -> List[nn.Module]:
        return [self.aux[head] for head in heads]

