"""Transformer building blocks operating on token fields shaped (B, n, T, c)."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class ContractError(ValueError):
    """An argument violates a documented precondition."""


def causal_mask(n: int, device=None) -> torch.Tensor:
    """Boolean n x n mask, ``M[i, j]`` allows frame i to attend frame j (j <= i)."""
    return torch.tril(torch.ones(n, n, dtype=torch.bool, device=device))


def check_causal(mask: torch.Tensor):
    n = mask.shape[-1]
    if mask.shape != (n, n) or not torch.equal(mask.bool(), causal_mask(n, mask.device)):
        raise ContractError("temporal mask must be lower triangular including the diagonal")


def sinusoidal(pos: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of (possibly fractional) positions, shape (..., dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=pos.dtype, device=pos.device) / half)
    args = pos[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ContractError(f"channels {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, mask=None):
        B, N, C = x.shape
        h = self.heads
        q, k, v = self.qkv(x).reshape(B, N, 3, h, C // h).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(C // h)
        if mask is not None:
            att = att.masked_fill(~mask, float("-inf"))
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(out)


class Mlp(nn.Sequential):
    def __init__(self, dim: int, ratio: float = 4.0):
        hidden = int(dim * ratio)
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class Block(nn.Module):
    """Pre-norm residual transformer block over (B, N, C) sequences."""

    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x, mask=None, pos=None):
        h = self.norm1(x)
        if pos is not None:
            h = h + pos
        x = x + self.attn(h, mask)
        return x + self.mlp(self.norm2(x))


def _over_space(x, fn):
    B, n, T, C = x.shape
    return fn(x.reshape(B * n, T, C)).reshape(B, n, T, C)


def _over_time(x, fn):
    B, n, T, C = x.shape
    y = fn(x.permute(0, 2, 1, 3).reshape(B * T, n, C))
    return y.reshape(B, T, n, C).permute(0, 2, 1, 3)


class SpatialBlock(Block):
    """Self-attention among the tokens of each frame."""

    def forward(self, x):
        return _over_space(x, super().forward)


class TemporalBlock(Block):
    """Self-attention across frames at each token position, masked by ``mask``.

    A sinusoidal frame-index embedding is added to the normalized attention
    input, so the residual stream itself carries no positional offset.
    """

    def forward(self, x, mask):
        n, C = x.shape[1], x.shape[-1]
        pos = sinusoidal(torch.arange(n, dtype=x.dtype, device=x.device), C)
        return _over_time(x, lambda s: Block.forward(self, s, mask, pos))


# ---------------------------------------------------------------------------
# AdaLN-conditioned blocks

def modulate(x, shift, scale):
    return x * (1 + scale) + shift


class TimestepEmbedder(nn.Module):
    def __init__(self, dim, freq_dim=128):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, tau):
        # tau in [0, 1]; scaled so the sinusoid frequencies resolve small steps
        return self.mlp(sinusoidal(tau * 1000.0, self.freq_dim))


class AdaLNBlock(nn.Module):
    """DiT block: shift/scale/gate of both sublayers come from the condition.

    The modulation projection is zero-initialized, so a fresh block is the
    identity map.
    """

    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(dim, mlp_ratio)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def forward(self, x, cond, mask=None, pos=None):
        # x: (B', N, C); cond: (B', C)
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(cond)[:, None].chunk(6, dim=-1)
        h = modulate(self.norm1(x), sh1, sc1)
        if pos is not None:
            h = h + pos
        x = x + g1 * self.attn(h, mask)
        return x + g2 * self.mlp(modulate(self.norm2(x), sh2, sc2))


class SpatialDiTBlock(AdaLNBlock):
    def forward(self, x, cond):
        B, n, T, C = x.shape
        c = cond[:, None].expand(B, n, C).reshape(B * n, C)
        return _over_space(x, lambda s: AdaLNBlock.forward(self, s, c))


class TemporalDiTBlock(AdaLNBlock):
    def forward(self, x, cond, mask):
        B, n, T, C = x.shape
        c = cond[:, None].expand(B, T, C).reshape(B * T, C)
        pos = sinusoidal(torch.arange(n, dtype=x.dtype, device=x.device), C)
        return _over_time(x, lambda s: AdaLNBlock.forward(self, s, c, mask, pos))


class FinalLayer(nn.Module):
    def __init__(self, dim, out_dim):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        self.linear = nn.Linear(dim, out_dim)
        for lin in (self.ada[1], self.linear):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x, cond):
        # cond broadcasts over every axis between batch and channels
        shape = (cond.shape[0],) + (1,) * (x.dim() - 2) + (cond.shape[-1],)
        shift, scale = self.ada(cond).reshape(*shape[:-1], 2 * shape[-1]).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))
