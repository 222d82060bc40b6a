"""Procedural synthetic driving clips.

Every scene is a constant-curvature lane seen by a forward pinhole camera on
an ego vehicle that drives the lane centerline at constant speed.  Roadside
obstacles are vertical cylinders; dynamic agents are cylinders moving at
constant velocity.  Depth is ray-cast analytically, so depth maps and point
maps agree to float precision.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import DataError, Intrinsics, polyline_project, unproject_depth

COMMANDS = ("left", "straight", "right")
STATUS_FIELDS = ("x", "y", "yaw", "speed")

SKY_TOP = np.array([0.35, 0.55, 0.9])
SKY_BOTTOM = np.array([0.75, 0.85, 0.95])
ROAD = np.array([0.35, 0.35, 0.38])
MARKING = np.array([0.92, 0.92, 0.85])
GRASS = np.array([0.25, 0.5, 0.2])


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    n: int = 4
    height: int = 64
    width: int = 96
    horizon: int = 8
    dt: float = 0.5
    hfov_deg: float = 90.0
    cam_height: float = 1.5
    max_range: float = 50.0
    n_static: int = 4
    n_dynamic: int = 2
    speed_range: tuple = (4.0, 8.0)
    curvature_max: float = 0.02
    halfwidth_range: tuple = (1.75, 2.25)

    def validate(self):
        if self.n < 2:
            raise ConfigError(f"n must be >= 2, got {self.n}")
        if self.height < 16 or self.width < 16:
            raise ConfigError(f"height and width must be >= 16, got {self.height}x{self.width}")
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")

    def intrinsics(self) -> Intrinsics:
        return Intrinsics.from_fov(self.height, self.width, self.hfov_deg, self.cam_height)


@dataclass
class WorldState:
    lane_centerline: np.ndarray            # P x 2
    lane_halfwidth: float
    static_obstacles: list                 # [((x, y), r)]
    dynamic_agents: list                   # [((x, y), (vx, vy), r)] at t = 0
    rng_seed: int
    curvature: float = 0.0
    obstacle_height: list = field(default_factory=list)
    agent_height: list = field(default_factory=list)

    def agents_at(self, t: float):
        """All obstacles as ``(center, velocity, radius)`` at time ``t``."""
        out = [(np.asarray(c, float), np.zeros(2), float(r)) for c, r in self.static_obstacles]
        for p, v, r in self.dynamic_agents:
            p, v = np.asarray(p, float), np.asarray(v, float)
            out.append((p + v * t, v, float(r)))
        return out

    def to_json(self):
        return {
            "lane_centerline": np.asarray(self.lane_centerline).tolist(),
            "lane_halfwidth": self.lane_halfwidth,
            "static_obstacles": [[list(map(float, c)), float(r)] for c, r in self.static_obstacles],
            "dynamic_agents": [[list(map(float, p)), list(map(float, v)), float(r)]
                               for p, v, r in self.dynamic_agents],
            "rng_seed": self.rng_seed,
            "curvature": self.curvature,
            "obstacle_height": list(self.obstacle_height),
            "agent_height": list(self.agent_height),
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            lane_centerline=np.asarray(d["lane_centerline"], dtype=np.float64),
            lane_halfwidth=float(d["lane_halfwidth"]),
            static_obstacles=[(tuple(c), r) for c, r in d["static_obstacles"]],
            dynamic_agents=[(tuple(p), tuple(v), r) for p, v, r in d["dynamic_agents"]],
            rng_seed=int(d["rng_seed"]),
            curvature=float(d.get("curvature", 0.0)),
            obstacle_height=list(d.get("obstacle_height", [])),
            agent_height=list(d.get("agent_height", [])),
        )


ARRAY_FIELDS = ("images", "depths", "points", "valid_mask", "ego_status", "ego_poses",
                "goal", "future_traj")


@dataclass
class SceneSequence:
    images: np.ndarray        # n x H x W x 3 in [0, 1]
    depths: np.ndarray        # n x H x W x 1
    points: np.ndarray        # n x H x W x 3, frame-0 ego coordinates
    valid_mask: np.ndarray    # n x H x W x 1 bool
    ego_status: np.ndarray    # n x 4: x, y, yaw, speed
    ego_poses: np.ndarray     # n x 3: x, y, yaw
    nav_command: str
    goal: np.ndarray          # 2
    future_traj: np.ndarray   # T_f x 2
    world: WorldState
    dt: float = 0.5
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def command_index(self) -> int:
        return COMMANDS.index(self.nav_command)

    def to_bytes(self) -> bytes:
        parts = []
        for name in ARRAY_FIELDS:
            parts.append(np.ascontiguousarray(getattr(self, name), dtype="<f4").tobytes())
        return b"".join(parts)


# ---------------------------------------------------------------------------
# generation

def _arc(kappa, s):
    """Centerline point and heading at arclength ``s`` for curvature ``kappa``."""
    s = np.asarray(s, dtype=np.float64)
    if abs(kappa) < 1e-9:
        return np.stack([s, np.zeros_like(s)], -1), np.zeros_like(s)
    th = kappa * s
    return np.stack([np.sin(th) / kappa, (1.0 - np.cos(th)) / kappa], -1), th


def _trajectory_ok(world: WorldState, traj, t0, dt, ego_radius=1.0):
    from .evaluation import toy_pdms  # local import: evaluation depends on this module's types

    rep = toy_pdms(traj, world, traj, t0=t0, dt=dt, ego_radius=ego_radius)
    return rep.nc == 1.0 and rep.dac == 1.0 and rep.ttc == 1.0


def _history_clear(world, poses, dt, ego_radius=1.0):
    for k, (x, y, _) in enumerate(poses):
        for c, _, r in world.agents_at(k * dt):
            if math.hypot(c[0] - x, c[1] - y) < ego_radius + r + 0.5:
                return False
    return True


def _sample_world(rng, cfg: GeneratorConfig, seed, speed):
    kappa = float(rng.uniform(-cfg.curvature_max, cfg.curvature_max))
    halfwidth = float(rng.uniform(*cfg.halfwidth_range))
    s_line = np.arange(-20.0, 160.0 + 1e-9, 1.0)
    line, _ = _arc(kappa, s_line)

    static, heights = [], []
    for _ in range(cfg.n_static):
        s = rng.uniform(6.0, 45.0)
        r = rng.uniform(0.5, 1.5)
        side = rng.choice([-1.0, 1.0])
        off = side * (halfwidth + r + rng.uniform(0.8, 4.0))
        p, th = _arc(kappa, s)
        normal = np.array([-math.sin(th), math.cos(th)])
        static.append((tuple(p + off * normal), float(r)))
        heights.append(float(rng.uniform(1.0, 3.0)))

    agents, aheights = [], []
    for i in range(cfg.n_dynamic):
        r = 1.0
        if i % 2 == 0:
            # lead vehicle in the ego lane, never slower than the ego
            s = rng.uniform(14.0, 30.0)
            v = speed + rng.uniform(0.5, 3.0)
            off = rng.uniform(-0.3, 0.3)
        else:
            # oncoming vehicle in the opposite lane
            s = rng.uniform(25.0, 60.0)
            v = -rng.uniform(3.0, 8.0)
            off = 2.0 * halfwidth + rng.uniform(0.5, 1.5)
        p, th = _arc(kappa, s)
        normal = np.array([-math.sin(th), math.cos(th)])
        tangent = np.array([math.cos(th), math.sin(th)])
        agents.append((tuple(p + off * normal), tuple(v * tangent), r))
        aheights.append(float(rng.uniform(1.4, 2.0)))

    return WorldState(lane_centerline=line, lane_halfwidth=halfwidth, static_obstacles=static,
                      dynamic_agents=agents, rng_seed=int(seed), curvature=kappa,
                      obstacle_height=heights, agent_height=aheights)


def _cylinders(world: WorldState, t):
    cyl = [(np.asarray(c, float), float(r), float(h))
           for (c, r), h in zip(world.static_obstacles, world.obstacle_height)]
    for (p, v, r), h in zip(world.dynamic_agents, world.agent_height):
        cyl.append((np.asarray(p, float) + np.asarray(v, float) * t, float(r), float(h)))
    return cyl


@np.errstate(invalid="ignore")
def _render(world: WorldState, pose, t, intr: Intrinsics, max_range, palette):
    """Ray-cast one frame. Returns (image, depth, valid)."""
    from .geometry import ray_directions

    H, W = intr.height, intr.width
    x0, y0, yaw = pose
    d = ray_directions(intr, yaw)
    h = intr.cam_height
    best = np.full((H, W), np.inf)
    color = np.zeros((H, W, 3))

    # ground plane z = 0
    down = d[..., 2] < -1e-9
    tg = np.where(down, -h / np.where(down, d[..., 2], -1.0), np.inf)
    gx, gy = x0 + tg * d[..., 0], y0 + tg * d[..., 1]
    hit_g = down & (tg <= max_range)
    best = np.where(hit_g, tg, best)
    if hit_g.any():
        gp = np.stack([gx[hit_g], gy[hit_g]], -1)
        dist, s = polyline_project(world.lane_centerline, gp)
        hw = world.lane_halfwidth
        col = np.where((dist <= hw)[:, None], ROAD, GRASS)
        edge = np.abs(dist - hw) < 0.15
        dash = (np.abs(dist) < 0.1) & (np.floor(s / 3.0) % 2 == 0)
        col = np.where((edge | dash)[:, None], MARKING, col)
        checker = ((np.floor(gp[:, 0] / 2.0) + np.floor(gp[:, 1] / 2.0)) % 2)[:, None]
        col = np.clip(col + 0.04 * (checker - 0.5) * (dist > hw)[:, None], 0.0, 1.0)
        color[hit_g] = col

    # vertical cylinders (side walls and top caps)
    dxy = d[..., :2]
    a = np.sum(dxy**2, -1)
    for k, (c, r, hc) in enumerate(_cylinders(world, t)):
        o = np.array([x0, y0]) - c
        b = 2.0 * dxy @ o
        cc = o @ o - r * r
        disc = b * b - 4 * a * cc
        ok = disc >= 0
        ts = np.where(ok, (-b - np.sqrt(np.where(ok, disc, 0.0))) / (2 * a), np.inf)
        z = h + ts * d[..., 2]
        side = ok & (ts > 1e-6) & (z >= 0) & (z <= hc)
        ts = np.where(side, ts, np.inf)
        if hc < h:
            tt = np.where(down, (hc - h) / np.where(down, d[..., 2], -1.0), np.inf)
            px, py = x0 + tt * d[..., 0] - c[0], y0 + tt * d[..., 1] - c[1]
            top = down & (px * px + py * py <= r * r)
            ts = np.minimum(ts, np.where(top, tt, np.inf))
        closer = (ts < best) & (ts <= max_range)
        best = np.where(closer, ts, best)
        shade = 0.75 + 0.25 * np.clip(1.0 - z / max(hc, 1e-6), 0.0, 1.0)
        color[closer] = palette[k] * shade[closer][:, None]

    valid = np.isfinite(best)
    rows = np.linspace(0.0, 1.0, H)[:, None, None]
    sky = SKY_TOP * (1 - rows) + SKY_BOTTOM * rows
    color = np.where(valid[..., None], color, np.broadcast_to(sky, (H, W, 3)))
    depth = np.where(valid, best, 0.0)
    return np.clip(color, 0.0, 1.0), depth, valid


def generate_scene(seed: int, cfg: GeneratorConfig | None = None) -> SceneSequence:
    """Generate one clip; a pure function of ``(seed, cfg)``."""
    cfg = cfg or GeneratorConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    intr = cfg.intrinsics()
    speed = float(rng.uniform(*cfg.speed_range))

    times = np.arange(cfg.n + cfg.horizon - 1) * cfg.dt
    for _ in range(50):
        world = _sample_world(rng, cfg, seed, speed)
        xy, yaw = _arc(world.curvature, speed * times)
        poses = np.concatenate([xy, yaw[:, None]], axis=1)
        traj = xy[cfg.n - 1:]
        t0 = (cfg.n - 1) * cfg.dt
        if _history_clear(world, poses[:cfg.n], cfg.dt) and _trajectory_ok(world, traj, t0, cfg.dt):
            break
    else:
        # fall back to an empty road, which is always feasible
        world.static_obstacles, world.obstacle_height = [], []
        world.dynamic_agents, world.agent_height = [], []

    poses = np.concatenate([xy, yaw[:, None]], axis=1)
    ego_poses = poses[:cfg.n].copy()
    ego_poses[0] = 0.0
    status = np.concatenate([ego_poses, np.full((cfg.n, 1), speed)], axis=1)
    future = xy[cfg.n - 1:cfg.n - 1 + cfg.horizon].copy()

    kappa = world.curvature
    command = "left" if kappa > 0.005 else "right" if kappa < -0.005 else "straight"
    goal_s = speed * (cfg.n - 1 + cfg.horizon) * cfg.dt + 20.0
    goal, _ = _arc(kappa, goal_s)

    n_obj = len(world.static_obstacles) + len(world.dynamic_agents)
    palette = rng.uniform(0.1, 0.95, size=(max(n_obj, 1), 3))

    images = np.zeros((cfg.n, cfg.height, cfg.width, 3), np.float32)
    depths = np.zeros((cfg.n, cfg.height, cfg.width, 1), np.float32)
    points = np.zeros((cfg.n, cfg.height, cfg.width, 3), np.float32)
    valid = np.zeros((cfg.n, cfg.height, cfg.width, 1), bool)
    for k in range(cfg.n):
        img, dep, val = _render(world, ego_poses[k], k * cfg.dt, intr, cfg.max_range, palette)
        images[k] = img
        depths[k, ..., 0] = dep
        valid[k, ..., 0] = val
        # points derive from the stored float32 depth so the duality holds exactly
        points[k] = unproject_depth(depths[k], ego_poses[k], intr, valid[k])

    return SceneSequence(
        images=images, depths=depths, points=points, valid_mask=valid,
        ego_status=status.astype(np.float32), ego_poses=ego_poses.astype(np.float32),
        nav_command=command, goal=np.asarray(goal, np.float32),
        future_traj=future.astype(np.float32), world=world, dt=cfg.dt,
        meta={"seed": int(seed), "id": f"scene-{int(seed):06d}", "config": asdict(cfg)},
    )


def generate_dataset(seeds, cfg: GeneratorConfig | None = None):
    return [generate_scene(int(s), cfg) for s in seeds]


# ---------------------------------------------------------------------------
# dataset IO

MANIFEST = "manifest.json"
FORMAT_NAME = "drivelatent-scenes"
FORMAT_VERSION = 1


def _atomic_write(path: Path, data: bytes):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(path, sequences):
    """Write sequences as one little-endian float32 record each plus a manifest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for i, seq in enumerate(sequences):
        fields, offset, chunks = [], 0, []
        for name in ARRAY_FIELDS:
            arr = np.ascontiguousarray(getattr(seq, name), dtype="<f4")
            fields.append({"name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.nbytes
        blob = b"".join(chunks)
        fname = f"seq_{i:05d}.bin"
        _atomic_write(root / fname, blob)
        records.append({
            "file": fname, "nbytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest(),
            "fields": fields, "nav_command": seq.nav_command, "dt": seq.dt,
            "world": seq.world.to_json(), "meta": seq.meta,
        })
    manifest = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "count": len(records),
                "seeds": [r["meta"].get("seed") for r in records], "records": records}
    _atomic_write(root / MANIFEST, json.dumps(manifest, indent=1).encode())


def read_dataset(path):
    root = Path(path)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt manifest: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise FormatError(f"unknown format {manifest.get('format')!r}")
    records = manifest.get("records")
    if not isinstance(records, list) or manifest.get("count") != len(records):
        raise FormatError("manifest count does not match records")

    out = []
    for rec in records:
        blob = (root / rec["file"]).read_bytes()
        if len(blob) != rec["nbytes"]:
            raise FormatError(f"{rec['file']}: expected {rec['nbytes']} bytes, found {len(blob)}")
        arrays, offset = {}, 0
        names = [f["name"] for f in rec["fields"]]
        if sorted(names) != sorted(ARRAY_FIELDS):
            raise FormatError(f"{rec['file']}: field list {names} is incomplete")
        _check_shapes(rec["file"], {f["name"]: tuple(f["shape"]) for f in rec["fields"]})
        for f in rec["fields"]:
            count = int(np.prod(f["shape"]))
            if f["offset"] != offset or offset + 4 * count > len(blob):
                raise FormatError(f"{rec['file']}: field '{f['name']}' shape {f['shape']} "
                                  f"does not match the payload")
            arrays[f["name"]] = np.frombuffer(blob, dtype="<f4", count=count,
                                              offset=offset).reshape(f["shape"]).astype(np.float32)
            offset += 4 * count
        if offset != len(blob):
            raise FormatError(f"{rec['file']}: {len(blob) - offset} trailing bytes; "
                              f"field shapes do not match the payload")
        if hashlib.sha256(blob).hexdigest() != rec["sha256"]:
            raise FormatError(f"{rec['file']}: checksum mismatch")
        out.append(SceneSequence(
            images=arrays["images"], depths=arrays["depths"], points=arrays["points"],
            valid_mask=arrays["valid_mask"].astype(bool), ego_status=arrays["ego_status"],
            ego_poses=arrays["ego_poses"], nav_command=rec["nav_command"], goal=arrays["goal"],
            future_traj=arrays["future_traj"], world=WorldState.from_json(rec["world"]),
            dt=float(rec["dt"]), meta=rec["meta"],
        ))
    return out


def _check_shapes(fname, a):
    if len(a["images"]) != 4 or a["images"][3] != 3:
        raise FormatError(f"{fname}: field 'images' has shape {a['images']}")
    n, H, W = a["images"][:3]
    expect = {"images": (n, H, W, 3), "depths": (n, H, W, 1), "points": (n, H, W, 3),
              "valid_mask": (n, H, W, 1), "ego_status": (n, len(STATUS_FIELDS)),
              "ego_poses": (n, 3), "goal": (2,)}
    for name, shp in expect.items():
        if tuple(a[name]) != shp:
            raise FormatError(f"{fname}: field '{name}' has shape {a[name]}, expected {shp}")
    if len(a["future_traj"]) != 2 or a["future_traj"][1] != 2:
        raise FormatError(f"{fname}: field 'future_traj' has shape {a['future_traj']}")
