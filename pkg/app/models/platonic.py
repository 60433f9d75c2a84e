"""Layers acting on regular group features of shape (..., |G|, C).

A feature rotated by group element h has its group axis shifted:
f'[g] = f[h⁻¹g]. Every layer here commutes with that shift.
"""
import math
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import InfeasibleWidth, RangeError, ShapeError
from .groups import GroupTable
from .layers import INIT_STD, qk_norm_attention

CHANNEL_MODES = ("compute", "parameter", "balanced")


def channel_match(d_model: int, order: int, mode: str, num_heads: int) -> int:
    """Per-slot channel count C for a target width D.

    compute: D/|G|, parameter: D/√|G|, balanced: D/|G|^(2/3); floored to a
    multiple of the head count.
    """
    if mode not in CHANNEL_MODES:
        raise RangeError(f"Unknown channel mode {mode!r}; expected one of {CHANNEL_MODES}")
    if d_model < order:
        raise InfeasibleWidth(f"Width {d_model} is smaller than the group order {order}")
    exponent = {"compute": 1.0, "parameter": 0.5, "balanced": 2.0 / 3.0}[mode]
    raw = d_model / order ** exponent
    channels = int(math.floor(raw / num_heads)) * num_heads
    if channels < num_heads:
        raise InfeasibleWidth(f"{mode} matching of width {d_model} over |G|={order} leaves {raw:.2f} "
                              f"channels, fewer than {num_heads} heads")
    return channels


def _rotations(group: GroupTable, like: torch.Tensor) -> torch.Tensor:
    return torch.tensor(group.rotations, dtype=like.dtype, device=like.device)


def lift_scalars(scalars: torch.Tensor, order: int) -> torch.Tensor:
    """Copy scalar channels into every group slot: (..., C) -> (..., |G|, C)"""
    return scalars.unsqueeze(-2).expand(*scalars.shape[:-1], order, scalars.shape[-1])


def lift_vectors(vectors: torch.Tensor, group: GroupTable) -> torch.Tensor:
    """Slot g holds R_g⁻¹ v for every vector: (..., V, 3) -> (..., |G|, 3V)"""
    if vectors.ndim < 2 or vectors.shape[-1] != 3:
        raise ShapeError(f"Vectors must have shape (..., V, 3), got {tuple(vectors.shape)}")
    # R_g⁻¹ = R_gᵀ
    framed = torch.einsum("gji,...vj->...gvi", _rotations(group, vectors), vectors)
    return framed.reshape(*framed.shape[:-2], -1)


def lift(scalars: Optional[torch.Tensor], vectors: Optional[torch.Tensor], group: GroupTable) -> torch.Tensor:
    """Scalar channels (..., C) first, then the three channels of one vector (..., 3)"""
    parts = []
    if scalars is not None:
        parts.append(lift_scalars(scalars, group.order))
    if vectors is not None:
        if vectors.shape[-1] != 3:
            raise ShapeError(f"Vectors must end in a 3-axis, got {tuple(vectors.shape)}")
        parts.append(lift_vectors(vectors.unsqueeze(-2), group))
    if not parts:
        raise ShapeError("lift needs scalars, vectors or both")
    if len(parts) == 2 and parts[0].shape[:-1] != parts[1].shape[:-1]:
        raise ShapeError(f"Scalar and vector leading shapes differ: {tuple(parts[0].shape)} vs {tuple(parts[1].shape)}")
    return torch.cat(parts, dim=-1)


def project_out(feature: torch.Tensor, group: GroupTable, num_scalars: int,
                num_vectors: int = 0) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """Invariant scalars (mean over G) and equivariant vectors ((1/|G|) Σ_g R_g f[g]).

    Vectors come back with shape (..., 3, V).
    """
    if feature.shape[-1] < num_scalars + 3 * num_vectors:
        raise ShapeError(f"Feature with {feature.shape[-1]} channels cannot hold {num_scalars} scalars "
                         f"and {num_vectors} vectors")
    if feature.shape[-2] != group.order:
        raise ShapeError(f"Group axis has size {feature.shape[-2]}, expected {group.order}")
    scalars = feature[..., :num_scalars].mean(dim=-2)
    if num_vectors == 0:
        return scalars, None
    block = feature[..., num_scalars: num_scalars + 3 * num_vectors]
    block = block.reshape(*block.shape[:-1], num_vectors, 3)
    vectors = torch.einsum("gij,...gvj->...iv", _rotations(group, feature), block) / group.order
    return scalars, vectors


def group_correlation(feature: torch.Tensor, weight: torch.Tensor, cayley: torch.Tensor) -> torch.Tensor:
    """out[..., g, :] = Σ_k feature[..., g·k, :] @ weight[k]"""
    order = cayley.shape[0]
    if feature.shape[-2] != order or weight.shape[0] != order or feature.shape[-1] != weight.shape[1]:
        raise ShapeError(f"Feature {tuple(feature.shape)} and weight {tuple(weight.shape)} do not match |G|={order}")
    gathered = feature[..., cayley, :]  # (..., g, k, C_in)
    return torch.einsum("...gkc,kcd->...gd", gathered, weight)


def expand_kernel(weight: torch.Tensor, group: GroupTable) -> torch.Tensor:
    """Dense (|G|·C_in, |G|·C_out) G-circulant matrix equal to the group correlation.

    Block (g', g) is weight[g⁻¹·g'], so out_flat = feature_flat @ kernel.
    """
    order, c_in, c_out = weight.shape
    cayley = torch.tensor(group.cayley)
    inverses = torch.tensor(group.inverses)
    index = cayley[inverses].T  # index[g', g] = cayley[inv[g], g']
    blocks = weight[index]  # (g', g, C_in, C_out)
    return blocks.permute(0, 2, 1, 3).reshape(order * c_in, order * c_out)


class GLinear(nn.Module):
    """Group-equivariant linear map with |G|·C_in·C_out weights"""

    def __init__(self, group: GroupTable, c_in: int, c_out: int, bias: bool = False):
        super().__init__()
        self.group = group
        self.c_in, self.c_out = c_in, c_out
        self.weight = nn.Parameter(torch.empty(group.order, c_in, c_out))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        self.register_buffer("cayley", torch.tensor(group.cayley), persistent=False)
        std = INIT_STD / math.sqrt(group.order)
        nn.init.trunc_normal_(self.weight, std=std, a=-2 * std, b=2 * std)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        out = group_correlation(feature, self.weight, self.cayley)
        return out if self.bias is None else out + self.bias

    def zero_(self) -> "GLinear":
        nn.init.zeros_(self.weight)
        if self.bias is not None:
            nn.init.zeros_(self.bias)
        return self


def g_linear(feature: torch.Tensor, weight: torch.Tensor, group: GroupTable) -> torch.Tensor:
    return group_correlation(feature, weight, torch.tensor(group.cayley, device=feature.device))


class GLayerNorm(nn.Module):
    """LayerNorm over the joint (group, channel) axes with per-channel affine"""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        mean = feature.mean(dim=(-2, -1), keepdim=True)
        var = feature.var(dim=(-2, -1), keepdim=True, unbiased=False)
        return (feature - mean) / torch.sqrt(var + self.eps) * self.weight + self.bias


class GAttention(nn.Module):
    """QK-normalized attention with the group axis folded into the heads axis"""

    def __init__(self, group: GroupTable, channels: int, num_heads: int):
        super().__init__()
        if channels % num_heads != 0:
            raise ShapeError(f"{channels} channels not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = channels // num_heads
        self.w_q = GLinear(group, channels, channels)
        self.w_k = GLinear(group, channels, channels)
        self.w_v = GLinear(group, channels, channels)
        self.w_out = GLinear(group, channels, channels)
        self.temperature = nn.Parameter(torch.full((num_heads,), math.sqrt(self.head_dim)))

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, g, _ = x.shape
        # (B, N, G, C) -> (B, G, H, N, dh)
        return x.reshape(b, n, g, self.num_heads, self.head_dim).permute(0, 2, 3, 1, 4)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None,
                key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        context = x if context is None else context
        q, k, v = self._split(self.w_q(x)), self._split(self.w_k(context)), self._split(self.w_v(context))
        out = qk_norm_attention(q, k, v, self.temperature[:, None, None], key_mask)
        b, g, _, n, _ = out.shape
        return self.w_out(out.permute(0, 3, 1, 2, 4).reshape(b, n, g, -1))


class GSwiGLU(nn.Module):
    def __init__(self, group: GroupTable, channels: int, hidden: int):
        super().__init__()
        self.w_gate = GLinear(group, channels, hidden)
        self.w_up = GLinear(group, channels, hidden)
        self.w_down = GLinear(group, hidden, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w_down(F.silu(self.w_gate(x)) * self.w_up(x))


class GEncoderBlock(nn.Module):
    def __init__(self, group: GroupTable, channels: int, num_heads: int, ffn_multiplier: int = 4):
        super().__init__()
        self.norm_attn = GLayerNorm(channels)
        self.attn = GAttention(group, channels, num_heads)
        self.norm_ffn = GLayerNorm(channels)
        self.ffn = GSwiGLU(group, channels, ffn_multiplier * channels)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = x + self.attn(self.norm_attn(x), key_mask=mask)
        return x + self.ffn(self.norm_ffn(x))


class GTransformerEncoder(nn.Module):
    def __init__(self, group: GroupTable, num_layers: int, channels: int, num_heads: int, ffn_multiplier: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList([GEncoderBlock(group, channels, num_heads, ffn_multiplier)
                                     for _ in range(num_layers)])
        self.final_norm = GLayerNorm(channels)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None,
                tap_layer: Optional[int] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        tapped = None
        for index, block in enumerate(self.blocks, start=1):
            x = block(x, mask)
            if index == tap_layer and index != len(self.blocks):
                tapped = self.final_norm(x)
        final = self.final_norm(x)
        return final, final if tapped is None else tapped


class GDecoderBlock(nn.Module):
    def __init__(self, group: GroupTable, channels: int, num_heads: int, ffn_multiplier: int = 4):
        super().__init__()
        self.norm_query = GLayerNorm(channels)
        self.norm_memory = GLayerNorm(channels)
        self.cross_attn = GAttention(group, channels, num_heads)
        self.norm_ffn = GLayerNorm(channels)
        self.ffn = GSwiGLU(group, channels, ffn_multiplier * channels)

    def forward(self, query: torch.Tensor, memory: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = query + self.cross_attn(self.norm_query(query), self.norm_memory(memory), key_mask=mask)
        return x + self.ffn(self.norm_ffn(x))
