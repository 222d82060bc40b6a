import math
import json

import numpy as np
import pytest

from drivelatent.evaluation import toy_pdms
from drivelatent.geometry import DataError, Intrinsics, project_points, unproject_depth
from drivelatent.scenario import (ConfigError, FormatError, GeneratorConfig, generate_scene,
                                  read_dataset, write_dataset)


@pytest.fixture(scope="module")
def small_cfg():
    return GeneratorConfig(n=4, height=32, width=48)


def test_first_pose_is_origin(small_cfg):
    seq = generate_scene(0, small_cfg)
    assert seq.images.shape == (4, 32, 48, 3)
    np.testing.assert_array_equal(seq.ego_poses[0], [0, 0, 0])


def test_generation_is_deterministic(small_cfg):
    assert generate_scene(3, small_cfg).to_bytes() == generate_scene(3, small_cfg).to_bytes()
    assert generate_scene(3, small_cfg).to_bytes() != generate_scene(4, small_cfg).to_bytes()


def test_depth_point_duality_seed7():
    cfg = GeneratorConfig()
    seq = generate_scene(7, cfg)
    intr = cfg.intrinsics()
    for t in range(seq.n):
        m = seq.valid_mask[t, ..., 0]
        assert m.any()
        pts = unproject_depth(seq.depths[t], seq.ego_poses[t], intr, seq.valid_mask[t])
        assert np.abs(pts - seq.points[t])[m].max() < 1e-5


def test_scene_invariants(small_cfg):
    for seed in range(6):
        seq = generate_scene(seed, small_cfg)
        assert seq.images.min() >= 0 and seq.images.max() <= 1
        m = seq.valid_mask[..., 0]
        assert np.all(seq.depths[..., 0][m] > 0)
        assert np.all(seq.depths[..., 0][~m] == 0)
        np.testing.assert_allclose(seq.future_traj[0], seq.ego_poses[-1, :2], atol=1e-6)
        assert seq.future_traj.shape == (small_cfg.horizon, 2)
        assert seq.world.lane_halfwidth > 0
        assert all(r > 0 for _, r in seq.world.static_obstacles)
        assert all(r > 0 for _, _, r in seq.world.dynamic_agents)
        assert seq.nav_command in ("left", "straight", "right")


def test_ground_truth_trajectory_is_feasible(small_cfg):
    for seed in range(20):
        seq = generate_scene(seed, small_cfg)
        rep = toy_pdms(seq.future_traj, seq.world, seq.future_traj,
                       t0=(seq.n - 1) * seq.dt, dt=seq.dt)
        assert rep.nc == 1 and rep.dac == 1 and rep.ep == 1


@pytest.mark.parametrize("kw", [dict(n=1), dict(height=8), dict(width=15), dict(horizon=0)])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        generate_scene(0, GeneratorConfig(**kw))


def test_unproject_center_pixel_on_axis():
    intr = Intrinsics.from_fov(32, 48)
    depth = np.full((32, 48, 1), 7.5)
    pts = unproject_depth(depth, (0, 0, 0), intr)
    np.testing.assert_allclose(pts[16, 24], [7.5, 0.0, intr.cam_height], atol=1e-12)


def test_unproject_yaw_rotates_points():
    intr = Intrinsics.from_fov(32, 48)
    rng = np.random.default_rng(0)
    depth = rng.uniform(1, 20, (32, 48, 1))
    yaw = 0.7
    p0 = unproject_depth(depth, (0, 0, 0), intr)
    p1 = unproject_depth(depth, (0, 0, yaw), intr)
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.stack([c * p0[..., 0] - s * p0[..., 1], s * p0[..., 0] + c * p0[..., 1], p0[..., 2]], -1)
    np.testing.assert_allclose(p1, rot, atol=1e-12)


def test_project_unproject_round_trip():
    intr = Intrinsics.from_fov(64, 96)
    rng = np.random.default_rng(1)
    depth = rng.uniform(0.5, 40, (64, 96, 1))
    pose = (3.0, -1.2, 0.3)
    pts = unproject_depth(depth, pose, intr)
    u, v, d = project_points(pts, pose, intr)
    uu, vv = intr.pixel_grid()
    assert np.abs(u - uu).max() < 1e-6
    assert np.abs(v - vv).max() < 1e-6
    assert np.abs(d - depth[..., 0]).max() < 1e-6


def test_unproject_rejects_nonpositive_depth():
    intr = Intrinsics.from_fov(16, 16)
    depth = np.ones((16, 16, 1))
    depth[3, 4] = 0.0
    with pytest.raises(DataError):
        unproject_depth(depth, (0, 0, 0), intr)
    mask = depth > 0
    unproject_depth(depth, (0, 0, 0), intr, mask)


def test_dataset_round_trip(tmp_path, small_cfg):
    seqs = [generate_scene(s, small_cfg) for s in range(3)]
    write_dataset(tmp_path, seqs)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["count"] == 3 and manifest["seeds"] == [0, 1, 2]
    back = read_dataset(tmp_path)
    for a, b in zip(seqs, back):
        for name in ("images", "depths", "points", "valid_mask", "ego_status", "ego_poses",
                     "goal", "future_traj"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
        assert a.nav_command == b.nav_command
        np.testing.assert_array_equal(a.world.lane_centerline, b.world.lane_centerline)
        assert a.world.dynamic_agents == [tuple(map(lambda x: tuple(x) if isinstance(x, tuple) else x, ag))
                                          for ag in b.world.dynamic_agents]


def test_truncated_record_is_detected(tmp_path, small_cfg):
    write_dataset(tmp_path, [generate_scene(0, small_cfg)])
    f = tmp_path / "seq_00000.bin"
    f.write_bytes(f.read_bytes()[:-100])
    with pytest.raises(FormatError):
        read_dataset(tmp_path)


def test_manifest_shape_mismatch_names_field(tmp_path, small_cfg):
    write_dataset(tmp_path, [generate_scene(0, small_cfg)])
    mp = tmp_path / "manifest.json"
    man = json.loads(mp.read_text())
    field = next(f for f in man["records"][0]["fields"] if f["name"] == "depths")
    field["shape"][1] += 1
    mp.write_text(json.dumps(man))
    with pytest.raises(FormatError, match="depths"):
        read_dataset(tmp_path)


def test_corrupt_manifest(tmp_path, small_cfg):
    write_dataset(tmp_path, [generate_scene(0, small_cfg)])
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(FormatError):
        read_dataset(tmp_path)
