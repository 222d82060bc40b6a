"""The full world model: encoder, reconstruction decoders and generators."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .decoders import DecoderConfig, ReconDecoders, ReconOutput
from .encoder import EncoderConfig, LatentEncoder
from .generation import (DiTConfig, GuidanceEmbedding, NextFrameDiT, TrajectoryDiT, fm_training_loss,
                         predict_trajectory, trajectory_to_local)
from .objectives import ObjectiveConfig, RandomFeaturePerceptual, loss_ego, loss_uncertainty_map, loss_vis, sigreg


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    dit: DiTConfig = field(default_factory=DiTConfig)
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        enc = dict(d.get("encoder", {}))
        if "image_size" in enc:
            enc["image_size"] = tuple(enc["image_size"])
        dec = dict(d.get("decoder", {}))
        if "ego_scale" in dec:
            dec["ego_scale"] = tuple(dec["ego_scale"])
        dit = dict(d.get("dit", {}))
        if dit.get("schedule") is not None:
            dit["schedule"] = tuple(dit["schedule"])
        return cls(encoder=EncoderConfig(**enc), decoder=DecoderConfig(**dec), dit=DiTConfig(**dit),
                   seed=int(d.get("seed", 0)))


@dataclass
class Toggles:
    """Which objectives are active (the ablation axes)."""

    ego: bool = True
    appearance: bool = True
    geometry: bool = True
    generation: bool = True


class WorldModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        c = cfg.encoder.channels
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.encoder = LatentEncoder(cfg.encoder)
            self.decoders = ReconDecoders(cfg.encoder, cfg.decoder)
            self.guidance_embed = GuidanceEmbedding(c, cfg.dit.goal_scale)
            self.frame_dit = NextFrameDiT(c, cfg.dit)
            self.traj_dit = TrajectoryDiT(c, cfg.dit)
        self.perceptual = RandomFeaturePerceptual(seed=cfg.seed + 1234)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    # -- forward pieces ----------------------------------------------------

    def encode(self, images, status):
        return self.encoder(images, status)

    def decode(self, z) -> ReconOutput:
        return self.decoders(z)

    def guidance(self, command, goal):
        return self.guidance_embed(command, goal)

    def plan(self, z, batch, generator=None, steps=None):
        g = self.guidance(batch["command"], batch["goal"])
        return predict_trajectory(self, z, g, batch["anchor"], generator, steps)

    # -- data --------------------------------------------------------------

    def batch_from_sequences(self, seqs):
        dt = self.dtype

        def stack(name):
            return torch.as_tensor(np.stack([getattr(s, name) for s in seqs]), dtype=dt)

        status = stack("ego_status")
        return {
            "images": stack("images"), "depths": stack("depths"), "points": stack("points"),
            "mask": torch.as_tensor(np.stack([s.valid_mask for s in seqs]), dtype=torch.bool),
            "status": status, "poses": stack("ego_poses"), "goal": stack("goal"),
            "future": stack("future_traj"), "anchor": status[:, -1, :3],
            "command": torch.as_tensor([s.command_index for s in seqs], dtype=torch.long),
        }

    # -- objectives --------------------------------------------------------

    def loss_terms(self, batch, stage, toggles: Toggles, obj: ObjectiveConfig, generator=None):
        """Tensor loss terms for one batch; disabled terms are exact zeros."""
        zero = torch.zeros((), dtype=self.dtype)
        z = self.encode(batch["images"], batch["status"])
        terms = {k: zero for k in ("l_ego", "l_depth", "l_points", "l_vis", "l_gen")}
        if toggles.geometry:
            pts, dep, sd, sp = self.decoders.geometry(z)
            terms["l_depth"] = loss_uncertainty_map(dep, batch["depths"], sd, batch["mask"], obj.a)
            terms["l_points"] = loss_uncertainty_map(pts, batch["points"], sp, batch["mask"], obj.a)
        if toggles.appearance:
            col = self.decoders.appearance(z)
            terms["l_vis"] = loss_vis(col, batch["images"], obj, self.perceptual)
        if toggles.ego:
            terms["l_ego"] = loss_ego(self.decoders.ego(z), batch["poses"])
        sg = obj.sigreg
        terms["sigreg"] = sigreg(z, sg.projections, sg.beta, generator, max_tokens=sg.max_tokens)
        if stage == 2:
            terms["l_gen"] = self.generation_loss(z, batch, toggles, generator)
        return terms, z

    def generation_loss(self, z, batch, toggles: Toggles, generator=None):
        cfg = self.cfg.dit
        B = z.shape[0]
        g = self.guidance(batch["command"], batch["goal"])
        loss = torch.zeros((), dtype=z.dtype)
        if toggles.generation:
            nh = cfg.history
            z_h, z_t = z[:, :nh], z[:, nh:nh + cfg.horizon]
            eps = torch.randn(z_t.shape, generator=generator, dtype=z.dtype)
            tau = torch.rand(B, generator=generator, dtype=z.dtype)
            loss = loss + fm_training_loss(lambda x, t: self.frame_dit(x, t, z_h, g), z_t, eps, tau)
        target = trajectory_to_local(batch["future"], batch["anchor"], cfg.traj_scale)
        eps = torch.randn(target.shape, generator=generator, dtype=z.dtype)
        tau = torch.rand(B, generator=generator, dtype=z.dtype)
        loss = loss + fm_training_loss(lambda x, t: self.traj_dit(x, t, z, g), target, eps, tau)
        return loss
