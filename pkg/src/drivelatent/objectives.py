"""Reconstruction losses, the SIGReg prior-matching term and the objective total.

All losses accept torch tensors of any floating dtype and are differentiable.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ContractError

TERMS = ("l_ego", "l_depth", "l_points", "l_vis", "sigreg", "l_gen")


@dataclass
class SIGRegConfig:
    projections: int = 16
    beta: float = 1.0
    max_tokens: int | None = 1024   # random token subset per step; None uses all


@dataclass
class ObjectiveConfig:
    lam: float = 2e-4                # prior-matching weight
    a: float = 0.05                  # uncertainty log-weight
    w_perceptual: float = 1.0
    w_gan: float = 0.75
    sigreg: SIGRegConfig = field(default_factory=SIGRegConfig)
    perceptual: str = "random-feature"   # or "off"
    gan: str = "off"

    def validate(self):
        if self.lam < 0 or self.w_perceptual < 0 or self.w_gan < 0:
            raise ContractError("objective weights must be nonnegative")
        if self.sigreg.projections < 1 or self.sigreg.beta <= 0:
            raise ContractError("SIGReg needs projections >= 1 and beta > 0")
        if self.gan != "off":
            raise ContractError("only gan='off' is available")


@dataclass
class ObjectiveReport:
    l_ego: float = 0.0
    l_depth: float = 0.0
    l_points: float = 0.0
    l_vis: float = 0.0
    sigreg: float = 0.0
    l_gen: float = 0.0
    total: float = 0.0
    stage: int = 1
    step: int = 0

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in ("step", "stage") + TERMS + ("total",)})


# ---------------------------------------------------------------------------
# reconstruction terms

def wrap_angle(a):
    return torch.remainder(a + math.pi, 2 * math.pi) - math.pi


def loss_ego(pred, target):
    """Mean over frames of the Euclidean pose error with the yaw residual wrapped."""
    if pred.shape != target.shape or pred.shape[-1] != 3:
        raise ContractError(f"ego shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    d = pred - target
    d = torch.cat([d[..., :2], wrap_angle(d[..., 2:])], dim=-1)
    return torch.linalg.vector_norm(d, dim=-1).mean()


def _forward_diff(x):
    """Forward differences along rows and columns of (..., H, W, C), 0 at the far border."""
    dy = torch.zeros_like(x)
    dx = torch.zeros_like(x)
    dy[..., :-1, :, :] = x[..., 1:, :, :] - x[..., :-1, :, :]
    dx[..., :, :-1, :] = x[..., :, 1:, :] - x[..., :, :-1, :]
    return dy, dx


def loss_uncertainty_map(pred, gt, sigma, mask=None, a=0.05):
    """Uncertainty-weighted L1 on values and forward gradients, minus ``a`` mean log sigma.

    ``pred``/``gt`` are (..., H, W, C); ``sigma``/``mask`` are (..., H, W, 1).
    The per-pixel residual is the channel mean of ``|r| + |d_row r| + |d_col r|``
    with ``r = pred - gt``; a gradient term only counts where the pixel and
    its forward neighbor are both valid.  Averages run over valid pixels.
    """
    if pred.shape != gt.shape:
        raise ContractError(f"pred {tuple(pred.shape)} and gt {tuple(gt.shape)} differ")
    if not (sigma > 0).all():
        raise ContractError("uncertainty map must be strictly positive")
    if mask is None:
        mask = torch.ones_like(sigma, dtype=torch.bool)
    m = mask.to(pred.dtype)
    r = pred - gt
    ry, rx = _forward_diff(r)
    my, mx = _forward_diff(m)
    # neighbor validity: forward difference of the mask is 0 iff both equal, so require m == 1 too
    vy = m * (my == 0).to(m.dtype)
    vx = m * (mx == 0).to(m.dtype)
    vy[..., -1, :, :] = 0
    vx[..., :, -1, :] = 0
    per_px = r.abs().mean(-1, keepdim=True) + vy * ry.abs().mean(-1, keepdim=True) \
        + vx * rx.abs().mean(-1, keepdim=True)
    count = m.sum().clamp_min(1.0)
    weighted = (sigma * per_px * m).sum() / count
    log_term = (torch.log(sigma) * m).sum() / count
    return weighted - a * log_term


class RandomFeaturePerceptual(nn.Module):
    """Frozen, seeded random-convolution feature distance (stand-in for a
    learned perceptual metric)."""

    def __init__(self, seed: int = 1234, widths=(16, 32)):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        chans = (3,) + tuple(widths)
        self.weights = nn.ParameterList()
        for cin, cout in zip(chans[:-1], chans[1:]):
            w = torch.randn(cout, cin, 3, 3, generator=g) * math.sqrt(2.0 / (cin * 9))
            self.weights.append(nn.Parameter(w, requires_grad=False))

    def features(self, img):
        """img (..., H, W, 3) -> list of feature maps."""
        x = img.reshape(-1, *img.shape[-3:]).permute(0, 3, 1, 2) * 2.0 - 1.0
        feats = []
        for w in self.weights:
            x = F.relu(F.conv2d(x, w.to(x.dtype), stride=2, padding=1))
            feats.append(x)
        return feats

    def forward(self, a, b):
        return sum(((fa - fb) ** 2).mean() for fa, fb in zip(self.features(a), self.features(b)))


_DEFAULT_PERCEPTUAL = None


def default_perceptual():
    global _DEFAULT_PERCEPTUAL
    if _DEFAULT_PERCEPTUAL is None:
        _DEFAULT_PERCEPTUAL = RandomFeaturePerceptual()
    return _DEFAULT_PERCEPTUAL


def loss_vis(pred, target, cfg: ObjectiveConfig | None = None, perceptual=None, mask=None):
    """L1 + ``w_perceptual`` * feature distance + ``w_gan`` * adversarial term (off)."""
    cfg = cfg or ObjectiveConfig()
    if pred.shape != target.shape:
        raise ContractError(f"color shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    for name, x in (("prediction", pred), ("target", target)):
        if x.min() < 0 or x.max() > 1:
            raise ContractError(f"{name} colors outside [0, 1]")
    loss = (pred - target).abs().mean()
    if cfg.perceptual != "off" and cfg.w_perceptual > 0:
        net = perceptual if perceptual is not None else default_perceptual()
        loss = loss + cfg.w_perceptual * net(pred, target)
    # gan term is identically zero in mode "off"
    return loss


# ---------------------------------------------------------------------------
# prior matching

def ep_statistic(y, beta: float = 1.0):
    """Epps-Pulley statistic of 1-D samples against N(0, 1) with a N(0, beta^2) weight.

    Works column-wise on (m, R) inputs, returning R statistics.
    """
    y = torch.as_tensor(y)
    if not y.is_floating_point():
        y = y.double()
    if y.shape[0] == 0:
        raise ContractError("empty sample")
    if beta <= 0:
        raise ContractError("beta must be positive")
    m = y.shape[0]
    b2 = beta * beta
    diff = y[:, None] - y[None, :]
    pair = torch.exp(-0.5 * b2 * diff * diff).sum(dim=(0, 1)) / m
    cross = torch.exp(-0.5 * b2 * y * y / (1.0 + b2)).sum(0) * (2.0 / math.sqrt(1.0 + b2))
    return pair - cross + m / math.sqrt(1.0 + 2.0 * b2)


def random_directions(c, R, generator=None, dtype=torch.float64):
    u = torch.randn(c, R, generator=generator, dtype=dtype)
    return u / u.norm(dim=0, keepdim=True)


def sigreg(z, projections: int = 16, beta: float = 1.0, generator=None, directions=None,
           max_tokens=None):
    """Sliced Epps-Pulley distance of the token cloud in ``z`` from N(0, I).

    ``z`` is flattened to m token vectors of dimension c = ``z.shape[-1]``.
    Returns the mean over random unit directions of ``T / m``.
    """
    c = z.shape[-1]
    if c == 0:
        raise ContractError("zero-dimensional tokens")
    tok = z.reshape(-1, c)
    if max_tokens is not None and tok.shape[0] > max_tokens:
        sel = torch.randperm(tok.shape[0], generator=generator)[:max_tokens]
        tok = tok[sel]
    if directions is None:
        if projections < 1:
            raise ContractError("need at least one projection")
        directions = random_directions(c, projections, generator, dtype=tok.dtype)
    proj = tok @ directions.to(tok.dtype)
    m = proj.shape[0]
    # one direction at a time keeps memory at m^2
    stats = [ep_statistic(proj[:, r], beta) for r in range(proj.shape[1])]
    return torch.stack(stats).mean() / m


def mmd_stub(*_args, **_kw):
    raise NotImplementedError("only SIGReg is provided as the prior-matching divergence")


# ---------------------------------------------------------------------------
# totals

def total_objective(terms: dict, stage: int, lam: float = 2e-4, step: int = 0) -> ObjectiveReport:
    """Weighted total: recon terms + lam * sigreg (+ l_gen in stage 2)."""
    if stage not in (1, 2):
        raise ContractError(f"stage must be 1 or 2, got {stage}")
    required = ("l_ego", "l_depth", "l_points", "l_vis", "sigreg") + (("l_gen",) if stage == 2 else ())
    missing = [k for k in required if k not in terms]
    if missing:
        raise ContractError(f"missing objective terms: {missing}")
    vals = {k: float(terms.get(k, 0.0)) for k in TERMS}
    total = vals["l_ego"] + vals["l_depth"] + vals["l_points"] + vals["l_vis"] + lam * vals["sigreg"]
    if stage == 2:
        total += vals["l_gen"]
    else:
        vals["l_gen"] = 0.0
    return ObjectiveReport(**vals, total=total, stage=stage, step=step)


def combine(terms: dict, stage: int, lam: float):
    """Tensor version of :func:`total_objective` used for backprop."""
    total = terms["l_ego"] + terms["l_depth"] + terms["l_points"] + terms["l_vis"] + lam * terms["sigreg"]
    if stage == 2:
        total = total + terms["l_gen"]
    return total


# ---------------------------------------------------------------------------
# KL decomposition check on finite spaces

def _kl(p, q):
    p = np.asarray(p, np.float64)
    q = np.asarray(q, np.float64)
    nz = p > 0
    if np.any(q[nz] <= 0):
        return math.inf
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


def _check_prob(v, name, atol=1e-9):
    v = np.asarray(v, np.float64)
    if np.any(v < 0) or np.any(np.abs(v.sum(-1) - 1.0) > atol):
        raise ContractError(f"{name} is not a valid probability vector")
    return v


def verify_kl_decomposition(q_table, p_x, p_z, atol=1e-12):
    """Check E_x KL(q(z|x) || p(z)) = I_q(z; x) + KL(q(z) || p(z)) exactly.

    ``q_table`` is |X| x |Z| with rows q(z | x).  Returns ``(lhs, I_q, kl_agg)``.
    """
    q = _check_prob(q_table, "q_table rows")
    px = _check_prob(p_x, "p_x")
    pz = _check_prob(p_z, "p_z")
    if q.shape != (len(px), len(pz)):
        raise ContractError(f"q_table shape {q.shape} does not match priors")
    q_agg = px @ q
    lhs = sum(px[i] * _kl(q[i], pz) for i in range(len(px)))
    mi = sum(px[i] * _kl(q[i], q_agg) for i in range(len(px)))
    kl_agg = _kl(q_agg, pz)
    if math.isfinite(lhs) and abs(lhs - mi - kl_agg) > atol:
        raise AssertionError(f"decomposition gap {lhs - mi - kl_agg:.3e} exceeds {atol}")
    return lhs, mi, kl_agg
