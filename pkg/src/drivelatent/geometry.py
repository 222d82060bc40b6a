"""Planar and pinhole geometry shared by the scene generator and the metrics.

Conventions
-----------
Ego/world frame: x forward, y left, z up, origin at the frame-0 ego position
on the ground.  Camera frame: x right, y down, z along the optical axis; the
camera sits ``cam_height`` meters above the ego origin and looks along the
ego heading.  Depth is the optical-axis (z) coordinate, not the ray length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DataError(ValueError):
    """Raised when geometric input data violates its contract."""


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics with square pixels.

    Pixel ``(row i, col j)`` sits at image coordinates ``u = j``, ``v = i``,
    so for even sizes the pixel ``(H/2, W/2)`` lies exactly on the axis.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    height: int
    width: int
    cam_height: float = 1.5

    @classmethod
    def from_fov(cls, height: int, width: int, hfov_deg: float = 90.0, cam_height: float = 1.5):
        f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                   height=height, width=width, cam_height=cam_height)

    def pixel_grid(self):
        v, u = np.meshgrid(np.arange(self.height, dtype=np.float64),
                           np.arange(self.width, dtype=np.float64), indexing="ij")
        return u, v


def wrap_angle(a):
    """Wrap angles to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


def ray_directions(intr: Intrinsics, yaw: float = 0.0):
    """Per-pixel ray directions in world axes, scaled so the optical-axis
    component is 1 (a ray point at parameter ``t`` has depth ``t``).

    Returns H x W x 3.
    """
    u, v = intr.pixel_grid()
    right = (u - intr.cx) / intr.fx
    down = (v - intr.cy) / intr.fy
    c, s = math.cos(yaw), math.sin(yaw)
    # ego-local direction: forward=1, left=-right, up=-down
    fx_, fy_ = 1.0, -right
    dx = c * fx_ - s * fy_
    dy = s * fx_ + c * fy_
    return np.stack([dx, dy, -down], axis=-1)


def unproject_depth(depth, pose, intr: Intrinsics, mask=None):
    """Lift a depth map to 3-D points in frame-0 ego coordinates.

    Parameters
    ----------
    depth : array, H x W x 1 (or H x W)
        Optical-axis depth in meters.
    pose : sequence of 3 floats
        Camera ego pose ``(x, y, yaw)`` in frame-0 coordinates.
    intr : Intrinsics
    mask : array of bools, optional
        Valid pixels. Defaults to every pixel. Invalid pixels map to 0.

    Returns
    -------
    points : float64 array, H x W x 3
    """
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim == 3:
        d = d[..., 0]
    if d.shape != (intr.height, intr.width):
        raise DataError(f"depth shape {d.shape} does not match intrinsics "
                        f"{(intr.height, intr.width)}")
    valid = np.ones_like(d, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(d.shape)
    if np.any(~(d[valid] > 0)):
        raise DataError("nonpositive depth at a valid pixel")
    x, y, yaw = (float(p) for p in pose)
    rays = ray_directions(intr, yaw)
    pts = rays * d[..., None]
    pts[..., 0] += x
    pts[..., 1] += y
    pts[..., 2] += intr.cam_height
    pts[~valid] = 0.0
    return pts


def project_points(points, pose, intr: Intrinsics):
    """Inverse of :func:`unproject_depth`: world points -> (u, v, depth)."""
    p = np.asarray(points, dtype=np.float64)
    x, y, yaw = (float(q) for q in pose)
    c, s = math.cos(yaw), math.sin(yaw)
    rx, ry = p[..., 0] - x, p[..., 1] - y
    fwd = c * rx + s * ry
    left = -s * rx + c * ry
    up = p[..., 2] - intr.cam_height
    u = intr.cx + intr.fx * (-left / fwd)
    v = intr.cy + intr.fy * (-up / fwd)
    return u, v, fwd


# ---------------------------------------------------------------------------
# polylines

def polyline_project(polyline, pts):
    """Project 2-D points onto a polyline.

    Returns ``(distance, arclength)`` arrays with one entry per point.
    """
    poly = np.asarray(polyline, dtype=np.float64)
    q = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    a, b = poly[:-1], poly[1:]
    seg = b - a
    seglen = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    rel = q[:, None, :] - a[None]
    t = np.clip(np.einsum("psk,sk->ps", rel, seg) / np.maximum(seglen**2, 1e-12), 0.0, 1.0)
    foot = a[None] + t[..., None] * seg[None]
    dist = np.linalg.norm(q[:, None, :] - foot, axis=-1)
    idx = np.argmin(dist, axis=1)
    rows = np.arange(len(q))
    return dist[rows, idx], cum[idx] + t[rows, idx] * seglen[idx]


# ---------------------------------------------------------------------------
# discs moving at constant velocity

def discs_overlap(p_ego, p_agent, radius_sum):
    return float(np.hypot(*(np.asarray(p_ego) - np.asarray(p_agent)))) < radius_sum


def time_to_collision(p_rel, v_rel, radius_sum):
    """Earliest t >= 0 with ``|p_rel + v_rel t| <= radius_sum``; ``inf`` if never.

    ``p_rel``/``v_rel`` are agent-minus-ego position and velocity.
    """
    p = np.asarray(p_rel, dtype=np.float64)
    w = np.asarray(v_rel, dtype=np.float64)
    c = p @ p - radius_sum**2
    if c <= 0.0:
        return 0.0
    a = w @ w
    b = 2.0 * (p @ w)
    if a <= 1e-15 or b >= 0.0:
        return math.inf
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return math.inf
    return (-b - math.sqrt(disc)) / (2.0 * a)
