"""Reconstruction, representation-smoothness and planning metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import polyline_project, time_to_collision

PDMS_WEIGHTS = {"ep": 5.0, "ttc": 5.0, "comf": 2.0}


class EvalError(ValueError):
    pass


@dataclass
class ChamferReport:
    acc: float
    comp: float
    overall: float


@dataclass
class SmoothnessReport:
    knn_dist: float
    pca_ratio: float
    lap_smooth: float
    k: int = 32
    pca_m: int = 2


@dataclass
class PlanReport:
    nc: float
    dac: float
    ep: float
    ttc: float
    comf: float
    pdms: float


@dataclass
class EvalReport:
    chamfer: ChamferReport
    plan: PlanReport
    smoothness: SmoothnessReport | None
    items: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = {"chamfer": asdict(self.chamfer), "plan": asdict(self.plan),
             "smoothness": None if self.smoothness is None else asdict(self.smoothness),
             "n_items": len(self.items), "config": self.config}
        return json.dumps(d, indent=2, sort_keys=True)

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(self.to_json())
        if self.items:
            with open(out / "items.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(self.items[0].keys()))
                w.writeheader()
                w.writerows(self.items)


# ---------------------------------------------------------------------------
# reconstruction

def chamfer(pred, gt) -> ChamferReport:
    """Accuracy (pred -> gt), completeness (gt -> pred) and their mean."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise EvalError("chamfer needs non-empty point sets")
    acc = float(np.mean(cKDTree(gt).query(pred, k=1)[0]))
    comp = float(np.mean(cKDTree(pred).query(gt, k=1)[0]))
    return ChamferReport(acc=acc, comp=comp, overall=(acc + comp) / 2.0)


# ---------------------------------------------------------------------------
# smoothness of embeddings

def standardize(X):
    """Feature-wise standardization; constant features map to 0."""
    X = np.asarray(X, dtype=np.float64)
    sd = X.std(axis=0)
    return (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


def _knn(X, k):
    X = np.asarray(X, dtype=np.float64)
    N = len(X)
    if k < 1 or N <= k:
        raise EvalError(f"need N > k >= 1, got N={N}, k={k}")
    dist, idx = cKDTree(X).query(X, k=k + 1)
    # drop self; with duplicates self may not come first
    own = idx == np.arange(N)[:, None]
    drop = np.where(own.any(1), own.argmax(1), k)
    keep = np.ones_like(own)
    keep[np.arange(N), drop] = False
    return dist[keep].reshape(N, k), idx[keep].reshape(N, k)


def knn_avg_distance(X, k=32) -> float:
    dist, _ = _knn(X, k)
    return float(dist.mean())


def local_pca_ratio(X, k=32, m=2) -> float:
    """Mean share of local variance in the top ``m`` principal directions.

    Neighborhoods are the point plus its ``k`` nearest neighbors; a
    zero-variance neighborhood counts as ratio 1.
    """
    X = np.asarray(X, dtype=np.float64)
    if not 1 <= m <= k:
        raise EvalError(f"need k >= m >= 1, got k={k}, m={m}")
    _, idx = _knn(X, k)
    nb = X[np.concatenate([np.arange(len(X))[:, None], idx], axis=1)]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb) / nb.shape[1]
    ev = np.clip(np.linalg.eigvalsh(cov)[:, ::-1], 0.0, None)
    total = ev.sum(axis=1)
    top = ev[:, :m].sum(axis=1)
    scale = np.maximum(np.abs(X).max(), 1.0) ** 2
    degenerate = total <= 1e-12 * scale
    ratio = np.where(degenerate, 1.0, top / np.where(degenerate, 1.0, total))
    return float(ratio.mean())


def knn_edges(X, k):
    """Undirected edges of the symmetrized kNN graph, as an (E, 2) array with i < j."""
    _, idx = _knn(X, k)
    i = np.repeat(np.arange(len(idx)), k)
    j = idx.ravel()
    e = np.stack([np.minimum(i, j), np.maximum(i, j)], 1)
    return np.unique(e, axis=0)


def laplacian_smoothness(X, k=32) -> float:
    """Sum of squared edge lengths over the kNN graph, i.e. ``tr(X^T L X)``."""
    X = np.asarray(X, dtype=np.float64)
    e = knn_edges(X, k)
    d = X[e[:, 0]] - X[e[:, 1]]
    return float(np.sum(d * d))


def smoothness_report(X, k=32, pca_m=2, standardize_features=True) -> SmoothnessReport:
    X = standardize(X) if standardize_features else np.asarray(X, np.float64)
    return SmoothnessReport(knn_dist=knn_avg_distance(X, k), pca_ratio=local_pca_ratio(X, k, pca_m),
                            lap_smooth=laplacian_smoothness(X, k), k=k, pca_m=pca_m)


# ---------------------------------------------------------------------------
# planning

def pdms_from_components(nc, dac, ep, ttc, comf) -> float:
    w = PDMS_WEIGHTS
    return nc * dac * (w["ep"] * ep + w["ttc"] * ttc + w["comf"] * comf) / sum(w.values())


def toy_pdms(traj, world, gt_traj, t0=0.0, dt=0.5, ego_radius=1.0,
             ttc_threshold=1.0, max_acc=4.0, max_jerk=8.0) -> PlanReport:
    """Simplified predictive-driver-model score of a waypoint trajectory.

    ``traj`` and ``gt_traj`` are T x 2 waypoints spaced ``dt`` seconds apart,
    the first one at absolute scene time ``t0``.  Obstacles come from
    ``world.agents_at`` (constant-velocity extrapolation).
    """
    traj = np.asarray(traj, dtype=np.float64)
    gt = np.asarray(gt_traj, dtype=np.float64)
    if traj.ndim != 2 or traj.shape[1] != 2 or traj.shape != gt.shape:
        raise EvalError(f"trajectory shape {traj.shape} does not match ground truth {gt.shape}")
    if not np.all(np.isfinite(traj)):
        raise EvalError("trajectory contains non-finite waypoints")
    T = len(traj)
    times = t0 + dt * np.arange(T)

    vel = np.zeros_like(traj)
    if T > 1:
        diff = np.diff(traj, axis=0) / dt
        vel[:-1] = diff
        vel[-1] = diff[-1]

    nc, min_ttc = 1.0, math.inf
    for k in range(T):
        for c, v, r in world.agents_at(times[k]):
            rel = c - traj[k]
            if math.hypot(*rel) < ego_radius + r:
                nc = 0.0
            min_ttc = min(min_ttc, time_to_collision(rel, v - vel[k], ego_radius + r))
    ttc = 1.0 if min_ttc >= ttc_threshold else 0.0

    dist, _ = polyline_project(world.lane_centerline, traj)
    dac = 1.0 if np.all(dist <= world.lane_halfwidth) else 0.0

    _, s_pred = polyline_project(world.lane_centerline, traj[[0, -1]])
    _, s_gt = polyline_project(world.lane_centerline, gt[[0, -1]])
    gt_prog = s_gt[1] - s_gt[0]
    ep = 1.0 if gt_prog <= 1e-6 else float(np.clip((s_pred[1] - s_pred[0]) / gt_prog, 0.0, 1.0))

    comf = 1.0
    if T >= 3:
        acc = np.diff(np.diff(traj, axis=0), axis=0) / dt**2
        if np.max(np.linalg.norm(acc, axis=1)) > max_acc:
            comf = 0.0
        if T >= 4:
            jerk = np.diff(acc, axis=0) / dt
            if np.max(np.linalg.norm(jerk, axis=1)) > max_jerk:
                comf = 0.0

    return PlanReport(nc=nc, dac=dac, ep=ep, ttc=ttc, comf=comf,
                      pdms=pdms_from_components(nc, dac, ep, ttc, comf))


def mean_report(reports, cls):
    if not reports:
        raise EvalError("cannot average an empty list of reports")
    names = [f for f in cls.__dataclass_fields__ if f not in ("k", "pca_m")]
    return cls(**{f: float(np.mean([getattr(r, f) for r in reports])) for f in names})


# ---------------------------------------------------------------------------
# model-level evaluation

def evaluate_model(model, sequences, k=32, pca_m=2, seed=0, max_points=4096) -> EvalReport:
    """Evaluate a world model on a list of :class:`SceneSequence`.

    Chamfer is averaged over every reconstructed frame, the planning score
    over one sampled trajectory per sequence, and smoothness is computed on
    per-sequence mean-pooled latents after feature standardization.
    """
    import torch

    if not sequences:
        raise EvalError("empty evaluation split")
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    frame_reports, plan_reports, pooled, items = [], [], [], []
    model.eval()
    with torch.no_grad():
        for i, seq in enumerate(sequences):
            batch = model.batch_from_sequences([seq])
            z = model.encode(batch["images"], batch["status"])
            rec = model.decode(z)
            pts = rec.points[0].double().numpy()
            per_frame = []
            for t in range(seq.n):
                m = seq.valid_mask[t, ..., 0]
                if not m.any():
                    continue
                gt_pts = seq.points[t][m]
                pr_pts = pts[t][m]
                if len(gt_pts) > max_points:
                    sel = rng.choice(len(gt_pts), max_points, replace=False)
                    gt_pts, pr_pts = gt_pts[sel], pr_pts[sel]
                per_frame.append(chamfer(pr_pts, gt_pts))
            frame_reports.extend(per_frame)

            traj = model.plan(z, batch, generator=gen)[0].double().numpy()
            t0 = (seq.n - 1) * seq.dt
            plan = toy_pdms(traj, seq.world, seq.future_traj, t0=t0, dt=seq.dt)
            plan_reports.append(plan)
            pooled.append(z[0].mean(dim=(0, 1)).double().numpy())

            ch = mean_report(per_frame, ChamferReport) if per_frame else None
            item = {"index": i, "id": seq.meta.get("id", str(i))}
            if ch is not None:
                item.update({"acc": ch.acc, "comp": ch.comp, "overall": ch.overall})
            item.update(asdict(plan))
            items.append(item)

    smooth = None
    X = np.stack(pooled)
    k_eff = min(k, len(X) - 1)
    if k_eff >= 1:
        smooth = smoothness_report(X, k=k_eff, pca_m=min(pca_m, k_eff))
    return EvalReport(chamfer=mean_report(frame_reports, ChamferReport),
                      plan=mean_report(plan_reports, PlanReport),
                      smoothness=smooth, items=items,
                      config={"k": k, "pca_m": pca_m, "seed": seed, "n_sequences": len(sequences)})
