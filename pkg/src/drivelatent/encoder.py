"""Static + causal spatiotemporal encoder producing the unified latent field.

The latent ``z`` has shape (B, n, l + 1, c): ``l`` visual patch tokens per
frame followed by one ego-status token.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .layers import Block, ContractError, SpatialBlock, TemporalBlock, causal_mask, check_causal, sinusoidal

# (x, y, yaw, speed) are divided by these before the status MLP
STATUS_SCALE = (20.0, 20.0, 1.0, 10.0)


@dataclass
class EncoderConfig:
    image_size: tuple = (64, 96)
    patch_size: int = 8
    channels: int = 64
    depth: int = 4           # spatial/temporal layer pairs (full scale: 12)
    heads: int = 4
    static_depth: int = 2
    status_dim: int = 4
    mlp_ratio: float = 4.0
    static_mode: str = "learned"   # or "frozen-pretrained-adapter"

    def validate(self):
        H, W = self.image_size
        if H % self.patch_size or W % self.patch_size:
            raise ContractError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.channels % self.heads:
            raise ContractError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.depth < 0:
            raise ContractError("depth must be >= 0")
        if self.static_mode not in ("learned", "frozen-pretrained-adapter"):
            raise ContractError(f"unknown static_mode {self.static_mode!r}")

    @property
    def grid(self):
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def tokens(self):
        gh, gw = self.grid
        return gh * gw


def patch_positions(grid, c):
    """Fixed 2-D sinusoidal embedding: half the channels encode the row, half the column."""
    gh, gw = grid
    rows, cols = torch.meshgrid(torch.arange(gh, dtype=torch.float32), torch.arange(gw, dtype=torch.float32),
                                indexing="ij")
    half = c // 2
    return torch.cat([sinusoidal(rows.flatten(), half, 100.0), sinusoidal(cols.flatten(), c - half, 100.0)], -1)


class StaticEncoder(nn.Module):
    """Per-frame patch embedding + small transformer, and the ego-status MLP."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c, p = cfg.channels, cfg.patch_size
        self.patch = nn.Conv2d(3, c, kernel_size=p, stride=p)
        self.register_buffer("pos_fixed", patch_positions(cfg.grid, c), persistent=False)
        self.pos = nn.Parameter(torch.zeros(cfg.tokens, c))   # learned residual
        self.blocks = nn.ModuleList(Block(c, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.static_depth))
        self.status_mlp = nn.Sequential(nn.Linear(cfg.status_dim, c), nn.GELU(), nn.Linear(c, c))
        self.register_buffer("status_scale", torch.tensor(STATUS_SCALE[:cfg.status_dim]), persistent=False)
        if cfg.static_mode == "frozen-pretrained-adapter":
            self.requires_grad_(False)

    def forward(self, images, status):
        """images (B, n, H, W, 3) in [0, 1]; status (B, n, d_s) -> (B, n, l+1, c)."""
        B, n, H, W, _ = images.shape
        if (H, W) != tuple(self.cfg.image_size):
            raise ContractError(f"image size {(H, W)} does not match config {self.cfg.image_size}")
        if status.shape[:2] != (B, n) or status.shape[-1] != self.cfg.status_dim:
            raise ContractError(f"status shape {tuple(status.shape)} does not match images {(B, n)}")
        x = images.reshape(B * n, H, W, 3).permute(0, 3, 1, 2) * 2.0 - 1.0
        tok = self.patch(x).flatten(2).transpose(1, 2) + self.pos_fixed.to(x.dtype) + self.pos
        for blk in self.blocks:
            tok = blk(tok)
        z_rgb = tok.reshape(B, n, -1, tok.shape[-1])
        z_ego = self.status_mlp(status / self.status_scale.to(status.dtype))[:, :, None]
        return torch.cat([z_rgb, z_ego], dim=2)


class DynamicEncoder(nn.Module):
    """Alternating spatial / causal temporal attention layers."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        c = cfg.channels
        self.spatial = nn.ModuleList(SpatialBlock(c, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.temporal = nn.ModuleList(TemporalBlock(c, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))

    def forward(self, z, mask):
        check_causal(mask)
        if not torch.isfinite(z).all():
            raise ContractError("latent contains non-finite values")
        for s, t in zip(self.spatial, self.temporal):
            z = s(z)
            z = t(z, mask)
        return z


class LatentEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.static = StaticEncoder(cfg)
        self.dynamic = DynamicEncoder(cfg)

    def encode_static(self, images, status):
        return self.static(images, status)

    def encode_dynamic(self, z, mask=None):
        if mask is None:
            mask = causal_mask(z.shape[1], z.device)
        return self.dynamic(z, mask)

    def forward(self, images, status):
        z = self.encode_static(images, status)
        return self.encode_dynamic(z, causal_mask(z.shape[1], z.device))


def encode_sequence(encoder: LatentEncoder, seq) -> torch.Tensor:
    """Encode one :class:`~drivelatent.scenario.SceneSequence` to (n, l+1, c)."""
    p = next(encoder.parameters())
    images = torch.as_tensor(seq.images, dtype=p.dtype)[None]
    status = torch.as_tensor(seq.ego_status, dtype=p.dtype)[None]
    return encoder(images, status)[0]
