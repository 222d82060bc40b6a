"""Flow-matching generation of future latents and ego trajectories.

Corruption path: ``x_tau = (1 - tau) * x + tau * eps`` with ``tau = 1`` pure
noise, so the regression target ``x - eps`` is minus the path derivative and
sampling integrates ``x <- x + dtau * v`` from ``tau = 1`` down to 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .layers import (AdaLNBlock, ContractError, FinalLayer, SpatialDiTBlock, TemporalDiTBlock,
                     TimestepEmbedder, causal_mask)


@dataclass
class DiTConfig:
    depth: int = 4              # S/T pairs of the next-frame model (full scale: 12)
    heads: int = 4
    history: int = 3            # n^h
    horizon: int = 1            # n^t
    frame_steps: int = 100
    traj_steps: int = 5
    traj_depth: int = 4         # full scale: 16
    traj_horizon: int = 8
    traj_scale: float = 10.0    # meters per unit in trajectory space
    goal_scale: float = 50.0
    mlp_ratio: float = 4.0
    schedule: tuple | None = None   # explicit dtau values; uniform when None

    def validate(self):
        if self.frame_steps < 1 or self.traj_steps < 1:
            raise ContractError("sampling steps must be >= 1")
        if self.schedule is not None and abs(sum(self.schedule) - 1.0) > 1e-9:
            raise ContractError("dtau schedule must sum to 1")


class GuidanceEmbedding(nn.Module):
    """Navigation command embedding plus a linear map of the goal point."""

    def __init__(self, dim, goal_scale=50.0, n_commands=3):
        super().__init__()
        self.command = nn.Embedding(n_commands, dim)
        self.goal = nn.Linear(2, dim)
        self.goal_scale = goal_scale

    def forward(self, command, goal):
        return self.command(command) + self.goal(goal / self.goal_scale)


def _check_tau(tau):
    if torch.any(tau < 0) or torch.any(tau > 1):
        raise ContractError("tau must lie in [0, 1]")


class NextFrameDiT(nn.Module):
    """Spatial/temporal AdaLN transformer over the history followed by the
    noisy future frames; velocities are emitted at future positions only."""

    def __init__(self, channels, cfg: DiTConfig):
        super().__init__()
        self.cfg = cfg
        self.t_embed = TimestepEmbedder(channels)
        self.spatial = nn.ModuleList(SpatialDiTBlock(channels, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.temporal = nn.ModuleList(TemporalDiTBlock(channels, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.final = FinalLayer(channels, channels)

    def condition(self, tau, g_nav):
        return self.t_embed(tau) + g_nav

    def forward(self, x_noisy, tau, z_h, g_nav):
        _check_tau(tau)
        if z_h.shape[1] != self.cfg.history:
            raise ContractError(f"context has {z_h.shape[1]} frames, expected {self.cfg.history}")
        if x_noisy.shape[1] != self.cfg.horizon or x_noisy.shape[2:] != z_h.shape[2:]:
            raise ContractError(f"noisy input {tuple(x_noisy.shape)} does not match horizon/context")
        cond = self.condition(tau, g_nav)
        nh = z_h.shape[1]
        x = torch.cat([z_h, x_noisy], dim=1)
        mask = causal_mask(x.shape[1], x.device)
        for s, t in zip(self.spatial, self.temporal):
            x = s(x, cond)
            x = t(x, cond, mask)
        return self.final(x[:, nh:], cond)


class TrajectoryDiT(nn.Module):
    """AdaLN transformer over [pooled history tokens; waypoint tokens]."""

    def __init__(self, channels, cfg: DiTConfig):
        super().__init__()
        self.cfg = cfg
        self.t_embed = TimestepEmbedder(channels)
        self.inp = nn.Linear(2, channels)
        self.pos = nn.Parameter(torch.randn(cfg.traj_horizon, channels) * 0.02)
        self.ctx = nn.Linear(channels, channels)
        self.blocks = nn.ModuleList(AdaLNBlock(channels, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.traj_depth))
        self.final = FinalLayer(channels, 2)

    @staticmethod
    def pool(z_h):
        """Per-frame token means plus the latest ego token: (B, n_h + 1, c)."""
        return torch.cat([z_h.mean(dim=2), z_h[:, -1:, -1]], dim=1)

    def forward(self, x_noisy, tau, z_h, g_nav):
        _check_tau(tau)
        if z_h.shape[1] < 1:
            raise ContractError("trajectory prediction needs a nonempty history")
        cond = self.t_embed(tau) + g_nav
        ctx = self.ctx(self.pool(z_h))
        wp = self.inp(x_noisy) + self.pos
        x = torch.cat([ctx, wp], dim=1)
        for blk in self.blocks:
            x = blk(x, cond)
        return self.final(x[:, ctx.shape[1]:], cond)


# ---------------------------------------------------------------------------
# flow matching

def _bshape(tau, x):
    return tau.reshape(-1, *([1] * (x.dim() - 1)))


def fm_training_loss(velocity_fn, x_clean, eps, tau):
    """Mean squared error between ``velocity_fn(x_tau, tau)`` and ``x_clean - eps``."""
    if eps.shape != x_clean.shape:
        raise ContractError(f"noise {tuple(eps.shape)} and data {tuple(x_clean.shape)} differ")
    if tau.shape != (x_clean.shape[0],):
        raise ContractError("tau must have one entry per batch element")
    t = _bshape(tau, x_clean)
    x_tau = (1 - t) * x_clean + t * eps
    v = velocity_fn(x_tau, tau)
    return ((v - (x_clean - eps)) ** 2).mean()


def uniform_schedule(steps):
    return [1.0 / steps] * steps


def euler_sample(velocity_fn, shape, steps, generator=None, dtype=torch.float32, x_init=None,
                 schedule=None):
    """Integrate the velocity field from tau = 1 (Gaussian noise) to tau = 0."""
    if steps < 1:
        raise ContractError("steps must be >= 1")
    dts = list(schedule) if schedule is not None else uniform_schedule(steps)
    x = torch.randn(shape, generator=generator, dtype=dtype) if x_init is None else x_init.clone()
    tau = 1.0
    for dt in dts:
        tvec = torch.full((shape[0],), max(tau, 0.0), dtype=x.dtype)
        x = x + dt * velocity_fn(x, tvec)
        tau -= dt
    return x


# ---------------------------------------------------------------------------
# model-level sampling

def predict_next_frame(model, z_h, g_nav, generator=None, steps=None):
    """Sample the next latent frame and decode it.

    Returns ``(latent (B, 1, l+1, c), ReconOutput)``.
    """
    if z_h.shape[1] < 1:
        raise ContractError("history must be nonempty")
    cfg = model.cfg.dit
    if z_h.shape[1] < cfg.history:
        raise ContractError(f"need at least {cfg.history} history frames, got {z_h.shape[1]}")
    z_h = z_h[:, -cfg.history:]
    steps = steps or cfg.frame_steps
    B, _, T, c = z_h.shape

    def v(x, tau):
        return model.frame_dit(x, tau, z_h, g_nav)

    sched = cfg.schedule if cfg.schedule is not None and len(cfg.schedule) == steps else None
    latent = euler_sample(v, (B, cfg.horizon, T, c), steps, generator, z_h.dtype, schedule=sched)
    return latent, model.decode(latent)


def trajectory_to_local(traj, anchor, scale):
    """Frame-0 waypoints (B, T, 2) -> anchor-relative, scaled coordinates."""
    c, s = torch.cos(anchor[:, 2]), torch.sin(anchor[:, 2])
    d = traj - anchor[:, None, :2]
    fwd = c[:, None] * d[..., 0] + s[:, None] * d[..., 1]
    left = -s[:, None] * d[..., 0] + c[:, None] * d[..., 1]
    return torch.stack([fwd, left], -1) / scale


def trajectory_to_global(local, anchor, scale):
    c, s = torch.cos(anchor[:, 2]), torch.sin(anchor[:, 2])
    d = local * scale
    x = c[:, None] * d[..., 0] - s[:, None] * d[..., 1]
    y = s[:, None] * d[..., 0] + c[:, None] * d[..., 1]
    return torch.stack([x, y], -1) + anchor[:, None, :2]


def predict_trajectory(model, z_h, g_nav, anchor, generator=None, steps=None):
    """Sample T_f x 2 waypoints in frame-0 coordinates, anchored at ``anchor`` (B, 3)."""
    cfg = model.cfg.dit
    steps = steps or cfg.traj_steps
    if z_h.shape[1] < 1:
        raise ContractError("history must be nonempty")

    def v(x, tau):
        return model.traj_dit(x, tau, z_h, g_nav)

    local = euler_sample(v, (z_h.shape[0], cfg.traj_horizon, 2), steps, generator, z_h.dtype)
    return trajectory_to_global(local, anchor, cfg.traj_scale)


def rollout(model, images, status, K, command, goal, generator=None, steps=None, dt=0.5):
    """Autoregressive next-frame generation.

    ``images`` (B, n, H, W, 3) and ``status`` (B, n, 4) hold the observed
    prefix.  Each step re-encodes the grown sequence, samples one latent frame,
    decodes it, and appends the decoded image and pose to the context.

    Returns a dict with per-step decodes, the context lengths seen, and the
    merged colored point set (N x 6, xyz + rgb) of the first batch element.
    """
    if K < 1:
        raise ContractError("horizon K must be >= 1")
    g = model.guidance(command, goal)
    frames, lengths, merged = [], [], []
    for _ in range(K):
        lengths.append(images.shape[1])
        z = model.encode(images, status)
        latent, rec = predict_next_frame(model, z, g, generator, steps)
        frames.append({"latent": latent, "recon": rec})
        pose = rec.ego[:, 0]
        prev = status[:, -1]
        speed = torch.linalg.vector_norm(pose[:, :2] - prev[:, :2], dim=-1) / dt
        new_status = torch.cat([pose, speed[:, None]], dim=-1)[:, None]
        images = torch.cat([images, rec.colors], dim=1)
        status = torch.cat([status, new_status.to(status.dtype)], dim=1)
        keep = rec.depth[0, 0, ..., 0] > 0
        merged.append(torch.cat([rec.points[0, 0][keep], rec.colors[0, 0][keep]], dim=-1))
    return {"frames": frames, "context_lengths": lengths, "images": images, "status": status,
            "points": torch.cat(merged, dim=0)}
