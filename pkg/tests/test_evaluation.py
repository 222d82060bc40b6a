import math

import numpy as np
import pytest

from drivelatent.evaluation import (EvalError, chamfer, knn_avg_distance, knn_edges, laplacian_smoothness,
                                    local_pca_ratio, pdms_from_components, smoothness_report, standardize,
                                    toy_pdms)
from drivelatent.oracles import chamfer_bruteforce, knn_bruteforce, laplacian_bruteforce
from drivelatent.scenario import WorldState


def test_chamfer_trivial_cases():
    pts = np.random.default_rng(0).normal(size=(30, 3))
    r = chamfer(pts, pts)
    assert (r.acc, r.comp, r.overall) == (0.0, 0.0, 0.0)
    r = chamfer([[0, 0, 0]], [[1, 0, 0]])
    assert (r.acc, r.comp, r.overall) == (1.0, 1.0, 1.0)
    with pytest.raises(EvalError):
        chamfer(np.zeros((0, 3)), pts)


def test_chamfer_matches_bruteforce():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = rng.normal(size=(200, 3)), rng.normal(size=(150, 3)) * 2
        got = chamfer(a, b)
        ref = chamfer_bruteforce(a, b)
        assert np.allclose((got.acc, got.comp, got.overall), ref, atol=1e-9, rtol=0)


def test_chamfer_is_asymmetric_in_components():
    a = np.array([[0.0, 0, 0]])
    b = np.array([[1.0, 0, 0], [3.0, 0, 0]])
    r = chamfer(a, b)
    assert r.acc == 1.0 and r.comp == 2.0 and r.overall == 1.5


def test_knn_line_cloud():
    X = np.array([[0.0], [1.0], [2.0]])
    assert knn_avg_distance(X, 2) == pytest.approx(4 / 3, abs=1e-15)
    with pytest.raises(EvalError):
        knn_avg_distance(X, 3)


def test_knn_matches_bruteforce_and_is_rotation_invariant():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(120, 5))
    _, d = knn_bruteforce(X, 6)
    assert knn_avg_distance(X, 6) == pytest.approx(d.mean(), abs=1e-12)
    Q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    assert knn_avg_distance(X @ Q, 6) == pytest.approx(knn_avg_distance(X, 6), abs=1e-12)


def test_knn_with_duplicates_excludes_self_once():
    X = np.zeros((5, 2))
    assert knn_avg_distance(X, 3) == 0.0


def test_laplacian_cases():
    assert laplacian_smoothness(np.ones((10, 3)), 2) == 0.0
    assert laplacian_smoothness(np.array([[0.0, 0], [2.0, 0]]), 1) == 4.0
    X = np.random.default_rng(3).normal(size=(100, 4))
    assert laplacian_smoothness(X, 5) == pytest.approx(laplacian_bruteforce(X, 5), rel=1e-12)
    e = knn_edges(X, 5)
    assert np.all(e[:, 0] < e[:, 1]) and len(np.unique(e, axis=0)) == len(e)


def test_scaling_laws():
    X = np.random.default_rng(4).normal(size=(80, 3))
    s = 3.0
    assert knn_avg_distance(s * X, 4) == pytest.approx(s * knn_avg_distance(X, 4), rel=1e-12)
    assert laplacian_smoothness(s * X, 4) == pytest.approx(s**2 * laplacian_smoothness(X, 4), rel=1e-12)


def test_pca_ratio_cases():
    t = np.linspace(0, 1, 50)[:, None]
    line = t * np.array([[1.0, 2.0, -1.0]])
    assert local_pca_ratio(line, 8, 1) == pytest.approx(1.0, abs=1e-9)
    assert local_pca_ratio(np.zeros((20, 3)), 5, 1) == 1.0
    X = np.random.default_rng(5).normal(size=(2000, 4))
    # neighborhoods must cover the cloud; smaller ones are skewed by the density gradient
    assert abs(local_pca_ratio(X, len(X) - 1, 2) - 0.5) <= 0.05
    with pytest.raises(EvalError):
        local_pca_ratio(X, 2, 3)


def test_smoothness_report_constant_cloud():
    r = smoothness_report(np.full((40, 6), 2.5), k=8)
    assert (r.knn_dist, r.pca_ratio, r.lap_smooth) == (0.0, 1.0, 0.0)
    Z = standardize(np.random.default_rng(6).normal(3, 5, size=(100, 3)))
    assert np.allclose(Z.mean(0), 0) and np.allclose(Z.std(0), 1)


def _straight_world(agents=(), halfwidth=1.75):
    xs = np.linspace(-10, 200, 211)
    return WorldState(lane_centerline=np.stack([xs, np.zeros_like(xs)], 1), lane_halfwidth=halfwidth,
                      static_obstacles=[], dynamic_agents=list(agents), rng_seed=0)


def test_pdms_formula():
    assert pdms_from_components(1, 1, 1, 1, 1) == 1.0
    assert pdms_from_components(1, 1, 0, 1, 1) == pytest.approx(7 / 12)
    assert pdms_from_components(0, 1, 1, 1, 1) == 0.0


def test_toy_pdms_gt_and_stationary():
    world = _straight_world()
    gt = np.stack([np.arange(8) * 3.0, np.zeros(8)], 1)
    r = toy_pdms(gt, world, gt)
    assert (r.nc, r.dac, r.ep, r.ttc, r.comf, r.pdms) == (1, 1, 1, 1, 1, 1)
    still = np.zeros((8, 2))
    r = toy_pdms(still, world, gt)
    assert r.ep == 0 and r.nc == 1 and r.dac == 1
    assert r.pdms == pytest.approx(7 / 12)


def test_toy_pdms_collision_and_offroad():
    gt = np.stack([np.arange(8) * 3.0, np.zeros(8)], 1)
    # agent moving so that it sits on waypoint 4 at t = 4 * 0.5
    agent = ((12.0 - 2.0 * 2.0, 0.0), (2.0, 0.0), 0.8)
    r = toy_pdms(gt, _straight_world([agent]), gt)
    assert r.nc == 0 and r.pdms == 0
    off = gt + np.array([0.0, 2.5])
    r = toy_pdms(off, _straight_world(), gt)
    assert r.dac == 0 and r.pdms == 0


def test_toy_pdms_comfort_and_ttc():
    world = _straight_world()
    gt = np.stack([np.arange(8) * 3.0, np.zeros(8)], 1)
    jerky = gt.copy()
    jerky[4, 0] += 2.0
    r = toy_pdms(jerky, world, gt)
    assert r.comf == 0 and r.nc == 1
    # slower agent ahead that is reached within 1 s but not touched at any waypoint
    agent = ((20.0, 0.0), (0.0, 0.0), 0.5)
    short = np.stack([np.arange(8) * 2.4, np.zeros(8)], 1)
    r = toy_pdms(short, _straight_world([agent]), gt)
    assert r.nc == 1 and r.ttc == 0


def test_toy_pdms_rejects_bad_shapes():
    world = _straight_world()
    with pytest.raises(EvalError):
        toy_pdms(np.zeros((5, 2)), world, np.zeros((6, 2)))
    with pytest.raises(EvalError):
        toy_pdms(np.full((3, 2), math.nan), world, np.zeros((3, 2)))
