import math
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

INIT_STD = 0.02
TIME_SCALE = 1000.0


def init_weights(module: nn.Module):
    """Truncated-normal linear/embedding weights, zero biases"""
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.trunc_normal_(module.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)


def zero_linear(layer: nn.Linear) -> nn.Linear:
    nn.init.zeros_(layer.weight)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


def sinusoidal_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Fixed sin/cos code of t ∈ [0, 1], shape (B,) -> (B, dim)"""
    half = dim // 2
    exponent = torch.arange(half, dtype=t.dtype, device=t.device) / half
    freqs = torch.exp(-math.log(10000.0) * exponent)
    args = (t * TIME_SCALE)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over the atom axis (dim 1) counting only real atoms"""
    weights = mask.to(x.dtype)
    while weights.ndim < x.ndim:
        weights = weights.unsqueeze(-1)
    return (x * weights).sum(dim=1) / weights.sum(dim=1).clamp_min(1.0)


class SwiGLU(nn.Module):
    def __init__(self, d_model: int, hidden: int):
        super().__init__()
        self.w_gate = nn.Linear(d_model, hidden, bias=False)
        self.w_up = nn.Linear(d_model, hidden, bias=False)
        self.w_down = nn.Linear(hidden, d_model, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w_down(F.silu(self.w_gate(x)) * self.w_up(x))


def qk_norm_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, temperature: torch.Tensor,
                      key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Exact softmax attention on L2-normalized queries and keys.

    q: (..., H, Nq, dh); k, v: (..., H, Nk, dh); temperature broadcasts
    against the (..., H, Nq, Nk) score tensor; key_mask: (B, Nk) with True
    for real tokens.
    """
    q = F.normalize(q, dim=-1)
    k = F.normalize(k, dim=-1)
    scores = torch.matmul(q, k.transpose(-1, -2)) * temperature
    if key_mask is not None:
        mask = key_mask
        while mask.ndim < scores.ndim - 1:
            mask = mask.unsqueeze(1)
        scores = scores.masked_fill(~mask.unsqueeze(-2), float("-inf"))
    return torch.matmul(torch.softmax(scores, dim=-1), v)


class QKNormAttention(nn.Module):
    """Multi-head attention with per-head query/key normalization and a learned temperature"""

    def __init__(self, d_model: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.w_q = nn.Linear(d_model, d_model, bias=False)
        self.w_k = nn.Linear(d_model, d_model, bias=False)
        self.w_v = nn.Linear(d_model, d_model, bias=False)
        self.w_out = nn.Linear(d_model, d_model, bias=False)
        self.temperature = nn.Parameter(torch.full((num_heads,), math.sqrt(self.head_dim)))

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None,
                key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        context = x if context is None else context
        q, k, v = self._split(self.w_q(x)), self._split(self.w_k(context)), self._split(self.w_v(context))
        out = qk_norm_attention(q, k, v, self.temperature[:, None, None], key_mask)
        b, _, n, _ = out.shape
        return self.w_out(out.transpose(1, 2).reshape(b, n, -1))


class EncoderBlock(nn.Module):
    """Pre-norm self-attention + SwiGLU block"""

    def __init__(self, d_model: int, num_heads: int, ffn_multiplier: int = 4):
        super().__init__()
        self.norm_attn = nn.LayerNorm(d_model)
        self.attn = QKNormAttention(d_model, num_heads)
        self.norm_ffn = nn.LayerNorm(d_model)
        self.ffn = SwiGLU(d_model, ffn_multiplier * d_model)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = x + self.attn(self.norm_attn(x), key_mask=mask)
        return x + self.ffn(self.norm_ffn(x))


class TransformerEncoder(nn.Module):
    def __init__(self, num_layers: int, d_model: int, num_heads: int, ffn_multiplier: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList([EncoderBlock(d_model, num_heads, ffn_multiplier) for _ in range(num_layers)])
        self.final_norm = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None,
                tap_layer: Optional[int] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns (final states, states after block ``tap_layer``), both normalized"""
        tapped = None
        for index, block in enumerate(self.blocks, start=1):
            x = block(x, mask)
            if index == tap_layer and index != len(self.blocks):
                tapped = self.final_norm(x)
        final = self.final_norm(x)
        return final, final if tapped is None else tapped


class DecoderBlock(nn.Module):
    """Residual cross-attention from ``query`` tokens onto ``memory`` tokens, then SwiGLU"""

    def __init__(self, d_model: int, num_heads: int, ffn_multiplier: int = 4):
        super().__init__()
        self.norm_query = nn.LayerNorm(d_model)
        self.norm_memory = nn.LayerNorm(d_model)
        self.cross_attn = QKNormAttention(d_model, num_heads)
        self.norm_ffn = nn.LayerNorm(d_model)
        self.ffn = SwiGLU(d_model, ffn_multiplier * d_model)

    def forward(self, query: torch.Tensor, memory: torch.Tensor,
                mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = query + self.cross_attn(self.norm_query(query), self.norm_memory(memory), key_mask=mask)
        return x + self.ffn(self.norm_ffn(x))
