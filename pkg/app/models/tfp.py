from typing import List, Sequence

import torch
import torch.nn as nn

from ..core import DomainClass
from ..errors import UnsupportedDomain, UnsupportedVariant
from ..flow.batch import FlowBatch
from ..schemas import TftConfig
from .base import AuxOutput, BaseDenoiser, DenoiseOutput, TrunkOutput
from .groups import build_group
from .layers import init_weights, masked_mean, sinusoidal_time_embedding, zero_linear
from .platonic import (
    GDecoderBlock,
    GLayerNorm,
    GLinear,
    GTransformerEncoder,
    channel_match,
    lift_scalars,
    lift_vectors,
    project_out,
)


class TrunkFlowPlatoformer(BaseDenoiser):
    """Group-equivariant denoiser for molecules.

    Atom, class and time embeddings enter as scalars copied over the group
    axis; Cartesian coordinates enter through the vector lift. Atom logits
    are invariant and coordinate predictions equivariant under every
    element of the configured rotation group.
    """

    variant = "tfp"

    def __init__(self, config: TftConfig):
        super().__init__(config)
        self.group = build_group(config.group)
        channels = channel_match(config.d_model, self.group.order, config.channel_mode, config.num_heads)
        self.channels = channels
        heads, ffn = config.num_heads, config.ffn_multiplier

        self.atom_embed = nn.Embedding(config.num_atom_types, channels)
        self.class_embed = nn.Embedding(3, channels)  # molecule, material, null
        self.time_proj = nn.Linear(config.time_embed_dim, channels)
        self.cart_proj = GLinear(self.group, 3, channels)

        self.trunk = GTransformerEncoder(self.group, config.num_trunk_layers, channels, heads, ffn)
        self.decoder = GDecoderBlock(self.group, channels, heads, ffn)
        self.atom_adapter = GLinear(self.group, channels, channels)
        self.cart_adapter = GLinear(self.group, channels, channels)

        self.atom_head = nn.Sequential(nn.Linear(channels, channels), nn.SiLU(),
                                       nn.Linear(channels, config.num_atom_types))
        self.cart_norm = GLayerNorm(channels)
        self.cart_out = GLinear(self.group, channels, 3)

        self.apply(init_weights)
        zero_linear(self.atom_head[-1])
        self.cart_out.zero_()

    def _check_domain(self, batch: FlowBatch):
        if bool((batch.domain != DomainClass.MOLECULE.index).any()):
            raise UnsupportedDomain("The equivariant variant only handles molecules")

    def embed_inputs(self, batch: FlowBatch, class_labels: torch.Tensor) -> torch.Tensor:
        self._check_domain(batch)
        noisy = batch.noisy
        mask = batch.atom_mask
        weights = mask.to(noisy.cart.dtype).unsqueeze(-1)
        cart = (noisy.cart - masked_mean(noisy.cart, mask)[:, None, :]) * weights

        scalars = self.atom_embed(noisy.atom_types)
        scalars = scalars + self.class_embed(class_labels)[:, None, :]
        scalars = scalars + self.time_proj(sinusoidal_time_embedding(batch.t, self.config.time_embed_dim))[:, None, :]
        h = lift_scalars(scalars, self.group.order)
        return h + self.cart_proj(lift_vectors(cart.unsqueeze(-2), self.group))

    def trunk_forward(self, h: torch.Tensor, atom_mask: torch.Tensor) -> TrunkOutput:
        z_final, z_tap = self.trunk(h, atom_mask, tap_layer=self.tap_layer)
        return TrunkOutput(z_final=z_final, z_tap=z_tap, input_embeddings=h, atom_mask=atom_mask)

    def denoise_decode(self, trunk: TrunkOutput) -> DenoiseOutput:
        mask = trunk.atom_mask
        shared = self.decoder(trunk.input_embeddings, trunk.z_final, mask)

        atom_scalars, _ = project_out(self.atom_adapter(shared), self.group, self.channels)
        logits = self.atom_head(atom_scalars)

        cart_feature = self.cart_out(self.cart_norm(self.cart_adapter(shared)))
        _, vectors = project_out(cart_feature, self.group, num_scalars=0, num_vectors=1)
        cart = vectors.squeeze(-1) * mask.to(vectors.dtype).unsqueeze(-1)

        # No periodic heads: those slots stay null
        batch_size = cart.shape[0]
        zeros3 = cart.new_zeros(batch_size, 3)
        return DenoiseOutput(atom_logits=logits, cart=cart, frac=torch.zeros_like(cart),
                             lengths=zeros3, angles=zeros3.clone())

    def aux_decode(self, trunk: TrunkOutput, heads: Sequence[str]) -> AuxOutput:
        raise UnsupportedVariant("The equivariant variant has no auxiliary prediction heads")

    def aux_modules(self, heads: Sequence[str]) -> List[nn.Module]:
        raise UnsupportedVariant("The equivariant variant has no auxiliary prediction heads")
