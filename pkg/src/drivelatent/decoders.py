"""Decoupled geometry, appearance and ego-pose decoders."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import EncoderConfig
from .layers import ContractError, SpatialBlock

SIGMA_FLOOR = 1e-3


@dataclass
class DecoderConfig:
    ego_layers: int = 4
    geometry_scale: float = 50.0     # meters per unit of raw output (the scene max range)
    ego_scale: tuple = (10.0, 10.0, 1.0)
    freeze_appearance: bool = False
    shared_trunk: bool = True        # one per-token trunk for all geometry heads


@dataclass
class ReconOutput:
    points: torch.Tensor       # (B, n, H, W, 3)
    depth: torch.Tensor        # (B, n, H, W, 1)
    sigma_depth: torch.Tensor  # (B, n, H, W, 1)
    sigma_points: torch.Tensor
    colors: torch.Tensor       # (B, n, H, W, 3)
    ego: torch.Tensor          # (B, n, 3)


def unpatchify(tok, grid, p, ch):
    """(B, n, l, p*p*ch) -> (B, n, H, W, ch)."""
    B, n = tok.shape[:2]
    gh, gw = grid
    x = tok.reshape(B, n, gh, gw, p, p, ch).permute(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(B, n, gh * p, gw * p, ch)


def _check(z):
    if not torch.isfinite(z).all():
        raise FloatingPointError("latent contains NaN or Inf")


def _trunk(c):
    return nn.Sequential(nn.LayerNorm(c), nn.Linear(c, c), nn.GELU())


class _PixelHead(nn.Module):
    """Per-token trunks feeding transposed-patch heads.

    ``groups`` maps a trunk name to the heads it feeds.
    """

    def __init__(self, enc: EncoderConfig, outs: dict, groups: dict | None = None):
        super().__init__()
        c, p = enc.channels, enc.patch_size
        self.grid, self.p = enc.grid, p
        self.groups = groups or {"trunk": list(outs)}
        self.trunks = nn.ModuleDict({g: _trunk(c) for g in self.groups})
        self.heads = nn.ModuleDict({k: nn.Linear(c, p * p * ch) for k, ch in outs.items()})
        self.channels = outs

    def raw(self, z):
        _check(z)
        vis = z[:, :, :-1]      # visual tokens only
        out = {}
        for g, names in self.groups.items():
            h = self.trunks[g](vis)
            for k in names:
                out[k] = unpatchify(self.heads[k](h), self.grid, self.p, self.channels[k])
        return out


class GeometryDecoder(_PixelHead):
    def __init__(self, enc: EncoderConfig, cfg: DecoderConfig):
        groups = None if cfg.shared_trunk else {"depth": ["depth", "sigma_depth"],
                                                "points": ["points", "sigma_points"]}
        super().__init__(enc, {"points": 3, "depth": 1, "sigma_depth": 1, "sigma_points": 1}, groups)
        self.scale = cfg.geometry_scale
        # value heads start at zero output, so the untrained model predicts 0 m
        for k in ("points", "depth"):
            nn.init.zeros_(self.heads[k].weight)
            nn.init.zeros_(self.heads[k].bias)

    def forward(self, z):
        r = self.raw(z)
        return (r["points"] * self.scale, r["depth"] * self.scale,
                F.softplus(r["sigma_depth"]) + SIGMA_FLOOR, F.softplus(r["sigma_points"]) + SIGMA_FLOOR)


class AppearanceDecoder(_PixelHead):
    def __init__(self, enc: EncoderConfig, cfg: DecoderConfig):
        super().__init__(enc, {"rgb": 3})
        if cfg.freeze_appearance:
            self.requires_grad_(False)

    def forward(self, z):
        return torch.sigmoid(self.raw(z)["rgb"])


class EgoDecoder(nn.Module):
    """Self-attention layers within each frame, then a linear head on the ego token."""

    def __init__(self, enc: EncoderConfig, cfg: DecoderConfig):
        super().__init__()
        c = enc.channels
        self.blocks = nn.ModuleList(SpatialBlock(c, enc.heads, enc.mlp_ratio) for _ in range(cfg.ego_layers))
        self.norm = nn.LayerNorm(c)
        self.head = nn.Linear(c, 3)
        self.register_buffer("scale", torch.tensor(cfg.ego_scale), persistent=False)

    def forward(self, z):
        _check(z)
        for blk in self.blocks:
            z = blk(z)
        return self.head(self.norm(z[:, :, -1])) * self.scale.to(z.dtype)


class ReconDecoders(nn.Module):
    def __init__(self, enc: EncoderConfig, cfg: DecoderConfig | None = None):
        super().__init__()
        cfg = cfg or DecoderConfig()
        self.cfg = cfg
        self.geometry = GeometryDecoder(enc, cfg)
        self.appearance = AppearanceDecoder(enc, cfg)
        self.ego = EgoDecoder(enc, cfg)

    def forward(self, z) -> ReconOutput:
        if z.dim() != 4:
            raise ContractError(f"expected latent (B, n, l+1, c), got {tuple(z.shape)}")
        pts, dep, sd, sp = self.geometry(z)
        return ReconOutput(points=pts, depth=dep, sigma_depth=sd, sigma_points=sp,
                           colors=self.appearance(z), ego=self.ego(z))


def decode_geometry(decoders: ReconDecoders, z):
    return decoders.geometry(z)


def decode_appearance(decoders: ReconDecoders, z):
    return decoders.appearance(z)


def decode_ego(decoders: ReconDecoders, z):
    return decoders.ego(z)
