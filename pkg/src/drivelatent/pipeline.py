"""Two-stage training, checkpoints and the ablation harness."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .evaluation import EvalReport, evaluate_model
from .model import ModelConfig, Toggles, WorldModel
from .objectives import ObjectiveReport, combine, total_objective
from .scenario import read_dataset

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DLCKPT\n"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainResult:
    model: WorldModel
    reports: list
    step: int
    checkpoint: str | None = None
    initial_param_hash: str | None = None
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# checkpoints

def param_hash(module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: WorldModel, train_cfg: dict | None = None, step=0, stage=1,
                    rng_state=None):
    buf = io.BytesIO()
    torch.save({"state_dict": model.state_dict(), "model_config": model.cfg.to_dict(),
                "train_config": train_cfg, "step": step, "stage": stage,
                "dtype": str(model.dtype), "rng_state": rng_state}, buf)
    payload = buf.getvalue()
    header = {"version": CHECKPOINT_VERSION, "nbytes": len(payload),
              "sha256": hashlib.sha256(payload).hexdigest()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(CHECKPOINT_MAGIC + json.dumps(header).encode() + b"\n" + payload)
    tmp.replace(path)
    return str(path)


def load_checkpoint(path):
    """Return ``(model, checkpoint dict)``; integrity and version are verified."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    rest = raw[len(CHECKPOINT_MAGIC):]
    nl = rest.find(b"\n")
    try:
        header = json.loads(rest[:nl])
    except (json.JSONDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')} "
                              f"!= supported version {CHECKPOINT_VERSION}")
    payload = rest[nl + 1:]
    if len(payload) != header["nbytes"] or hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: integrity check failed (truncated or corrupted, "
                              f"{len(payload)} of {header['nbytes']} bytes)")
    ckpt = torch.load(io.BytesIO(payload), weights_only=False)
    model = WorldModel(ModelConfig.from_dict(ckpt["model_config"]))
    if ckpt.get("dtype") == "torch.float64":
        model = model.double()
    model.load_state_dict(ckpt["state_dict"])
    return model, ckpt


# ---------------------------------------------------------------------------
# training

def _sequences(cfg: TrainConfig, sequences):
    if sequences is not None:
        return list(sequences)
    if cfg.data is None:
        raise FileNotFoundError("no dataset given: set `data` in the config")
    return read_dataset(cfg.data)


def _toggles(cfg: TrainConfig):
    return Toggles(ego=cfg.ego, appearance=cfg.appearance, geometry=cfg.geometry,
                   generation=cfg.enable_generation)


def _check_finite(terms):
    for k, v in terms.items():
        if not torch.isfinite(v).all():
            raise NonFiniteLossError(f"loss term '{k}' became non-finite ({float(v.detach())})")


def _run(model: WorldModel, cfg: TrainConfig, seqs, stage, log_fh=None):
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 17 * stage)
    rng = np.random.default_rng(cfg.seed + 31 * stage)
    if cfg.freeze_encoder:
        model.encoder.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    toggles = _toggles(cfg)
    reports, step = [], 0
    model.train()
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(seqs))
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                return reports, step
            batch = model.batch_from_sequences([seqs[i] for i in order[start:start + cfg.batch_size]])
            terms, _ = model.loss_terms(batch, stage, toggles, cfg.objective, gen)
            _check_finite(terms)
            loss = combine(terms, stage, cfg.objective.lam)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            rep = total_objective({k: float(v.detach()) for k, v in terms.items()}, stage,
                                  cfg.objective.lam, step)
            reports.append(rep)
            if log_fh is not None:
                log_fh.write(rep.to_json() + "\n")
            step += 1
    return reports, step


def _open_log(cfg):
    if cfg.log is None:
        return None
    p = Path(cfg.log)
    p.parent.mkdir(parents=True, exist_ok=True)
    return open(p, "a")


def train_stage1(cfg: TrainConfig, sequences=None, model: WorldModel | None = None) -> TrainResult:
    """Reconstruction training with ``L_recon + lam * SIGReg``."""
    cfg = copy.deepcopy(cfg)
    cfg.stage = 1
    cfg.validate()
    seqs = _sequences(cfg, sequences)
    if not seqs:
        raise FileNotFoundError("empty training set")
    model = model or WorldModel(cfg.model)
    fh = _open_log(cfg)
    try:
        reports, step = _run(model, cfg, seqs, 1, fh)
    finally:
        if fh:
            fh.close()
    ckpt = None
    if cfg.checkpoint:
        ckpt = save_checkpoint(cfg.checkpoint, model, cfg.to_dict(), step, 1)
    return TrainResult(model=model, reports=reports, step=step, checkpoint=ckpt)


def train_stage2(cfg: TrainConfig, stage1_ckpt, sequences=None) -> TrainResult:
    """Joint training with ``L_gen + L_recon + lam * SIGReg`` from stage-1 weights.

    ``stage1_ckpt`` is a checkpoint path or an in-memory :class:`WorldModel`.
    The optimizer state starts fresh.
    """
    cfg = copy.deepcopy(cfg)
    cfg.stage = 2
    cfg.validate()
    seqs = _sequences(cfg, sequences)
    if isinstance(stage1_ckpt, WorldModel):
        model = stage1_ckpt
    else:
        model, _ = load_checkpoint(stage1_ckpt)
    h0 = param_hash(model)
    fh = _open_log(cfg)
    try:
        reports, step = _run(model, cfg, seqs, 2, fh)
    finally:
        if fh:
            fh.close()
    ckpt = None
    if cfg.checkpoint:
        ckpt = save_checkpoint(cfg.checkpoint, model, cfg.to_dict(), step, 2)
    return TrainResult(model=model, reports=reports, step=step, checkpoint=ckpt, initial_param_hash=h0)


def depth_mae(model: WorldModel, sequences, batch_size=8) -> float:
    """Mean absolute depth error (meters) over valid pixels."""
    total, count = 0.0, 0
    model.eval()
    with torch.no_grad():
        for i in range(0, len(sequences), batch_size):
            b = model.batch_from_sequences(sequences[i:i + batch_size])
            z = model.encode(b["images"], b["status"])
            _, dep, _, _ = model.decoders.geometry(z)
            m = b["mask"]
            total += float((dep - b["depths"]).abs()[m].sum())
            count += int(m.sum())
    return total / max(count, 1)


def smoothed(values, window=50):
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")


# ---------------------------------------------------------------------------
# ablation

ABLATION_ROWS = (
    # ego pose, appearance, geometry, dynamic generation
    (True, False, False, False),
    (True, True, False, False),
    (True, False, True, False),
    (True, False, False, True),
    (True, False, True, True),
    (True, True, True, True),
)
ABLATION_COLUMNS = ("ego_pose", "appearance", "geometry", "dynamic_generation",
                    "NC", "DAC", "EP", "TTC", "Comf", "PDMS")


def run_ablation(base: TrainConfig, train_seqs=None, test_seqs=None, out_csv=None):
    """Train and evaluate the six toggle configurations; returns rows of dicts.

    Each row's PDMS is the mean of per-scene scores (``items`` holds them).
    """
    train_seqs = _sequences(base, train_seqs)
    test_seqs = list(test_seqs) if test_seqs is not None else train_seqs
    rows = []
    for ego, app, geo, gen in ABLATION_ROWS:
        cfg = copy.deepcopy(base)
        cfg.ego, cfg.appearance, cfg.geometry, cfg.enable_generation = ego, app, geo, gen
        cfg.checkpoint = None
        cfg.log = None
        r1 = train_stage1(cfg, train_seqs)
        r2 = train_stage2(cfg, r1.model, train_seqs)
        report = evaluate_model(r2.model, test_seqs, seed=cfg.seed)
        p = report.plan
        rows.append({"ego_pose": ego, "appearance": app, "geometry": geo, "dynamic_generation": gen,
                     "NC": p.nc, "DAC": p.dac, "EP": p.ep, "TTC": p.ttc, "Comf": p.comf,
                     "PDMS": p.pdms, "items": report.items})
    if out_csv:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, extrasaction="ignore")
            w.writeheader()
            w.writerows(rows)
    return rows
