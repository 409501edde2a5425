from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError


class MLP(nn.Module):
    """Linear layers with GELU between them; ``dims`` lists every width."""

    def __init__(self, dims: list[int]):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
        self.heads = heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x, causal: bool = False):
        B, T, D = x.shape
        dh = D // self.heads
        q, k, v = self.qkv(x).view(B, T, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        if causal:
            future = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
            att = att.masked_fill(future, float("-inf"))
        y = att.softmax(dim=-1) @ v
        return self.out(y.transpose(1, 2).reshape(B, T, D))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, d_model: int, heads: int, ffn_mult: int = 2):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ffn = MLP([d_model, ffn_mult * d_model, d_model])

    def forward(self, x, causal: bool = False):
        x = x + self.attn(self.ln1(x), causal)
        return x + self.ffn(self.ln2(x))


class TransformerStack(nn.Module):
    def __init__(self, d_model: int, depth: int, heads: int, ffn_mult: int = 2):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.blocks = nn.ModuleList(Block(d_model, heads, ffn_mult) for _ in range(depth))
        self.ln_out = nn.LayerNorm(d_model)

    def forward(self, x, causal: bool = False, name: str = "transformer"):
        for i, block in enumerate(self.blocks):
            x = block(x, causal)
            if not torch.isfinite(x).all():
                raise NumericError(f"{name}: non-finite activations after layer {i}")
        return self.ln_out(x)


def check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x
