"""Training configuration and toy-scale defaults.

Defaults are desk-scale; the comment beside each one gives the full-scale
value used for the 224x384 NAVSIM setting where one exists.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .layers import ContractError
from .model import ModelConfig
from .objectives import ObjectiveConfig, SIGRegConfig

DEFAULTS = {
    "stage": 1,
    "epochs": 10,               # full scale: 50 per stage
    "batch_size": 8,            # full scale: 64
    "lr": 1e-4,                 # full scale: 1e-4 (AdamW)
    "weight_decay": 5e-2,       # full scale: 5e-2
    "seed": 0,
    "ego": True,
    "appearance": True,
    "geometry": True,
    "enable_generation": True,
    "freeze_encoder": False,
    "max_steps": None,
    "data": None,
    "checkpoint": None,
    "log": None,
    "objective": {
        "lam": 2e-4,            # full scale: 2e-4
        "a": 0.05,
        "w_perceptual": 1.0,    # full scale: 1.0 (LPIPS)
        "w_gan": 0.75,          # full scale: 0.75
        "perceptual": "random-feature",
        "gan": "off",
        "sigreg": {"projections": 16, "beta": 1.0, "max_tokens": 1024},
    },
    "model": {
        "seed": 0,
        "encoder": {"image_size": [64, 96],   # full scale: 224 x 384
                    "patch_size": 8, "channels": 64,
                    "depth": 4,                 # full scale: 12
                    "heads": 4, "static_depth": 2, "status_dim": 4, "mlp_ratio": 4.0,
                    "static_mode": "learned"},
        "decoder": {"ego_layers": 4, "geometry_scale": 50.0, "ego_scale": [10.0, 10.0, 1.0],
                    "freeze_appearance": False, "shared_trunk": True},
        "dit": {"depth": 4,                     # full scale: 12
                "heads": 4, "history": 3, "horizon": 1,
                "frame_steps": 100, "traj_steps": 5,   # full scale: 100 and 5
                "traj_depth": 4,                # full scale: 16
                "traj_horizon": 8, "traj_scale": 10.0, "goal_scale": 50.0,
                "mlp_ratio": 4.0, "schedule": None},
    },
}


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 5e-2
    seed: int = 0
    ego: bool = True
    appearance: bool = True
    geometry: bool = True
    enable_generation: bool = True
    freeze_encoder: bool = False
    max_steps: int | None = None
    data: str | None = None
    checkpoint: str | None = None
    log: str | None = None
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if self.stage not in (1, 2):
            raise ContractError(f"stage must be 1 or 2, got {self.stage}")
        if self.lr <= 0:
            raise ContractError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        self.objective.validate()
        self.model.encoder.validate()
        self.model.dit.validate()

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d)
        obj = d.pop("objective", {})
        sg = SIGRegConfig(**obj.pop("sigreg", {}))
        model = ModelConfig.from_dict(d.pop("model", {}))
        return cls(**d, objective=ObjectiveConfig(**obj, sigreg=sg), model=model)


def deep_merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text):
    """``"a.b.c=value"`` -> nested dict; values are parsed as JSON when possible."""
    if "=" not in text:
        raise ContractError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    out = val
    for part in reversed(key.split(".")):
        out = {part: out}
    return out


def load_config(path=None, overrides=(), base=None) -> TrainConfig:
    """Layer defaults, an optional JSON file and ``key=value`` overrides."""
    d = copy.deepcopy(base if base is not None else DEFAULTS)
    if path is not None:
        d = deep_merge(d, json.loads(Path(path).read_text()))
    for ov in overrides:
        d = deep_merge(d, parse_override(ov) if isinstance(ov, str) else ov)
    unknown = set(d) - set(DEFAULTS)
    if unknown:
        raise ContractError(f"unknown config keys: {sorted(unknown)}")
    cfg = TrainConfig.from_dict(d)
    cfg.validate()
    return cfg
