import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from drivelatent.layers import ContractError
from drivelatent.objectives import (ObjectiveConfig, RandomFeaturePerceptual, ep_statistic, loss_ego,
                                    loss_uncertainty_map, loss_vis, random_directions, sigreg,
                                    total_objective, verify_kl_decomposition)
from drivelatent.oracles import ep_quadrature, kl_terms_by_entropies


def _random_problem(rng, nx, nz, sparse=False):
    q = rng.dirichlet(np.ones(nz), size=nx)
    if sparse:
        q[rng.random(q.shape) < 0.3] = 0
        q[:, 0] += 1e-3
        q /= q.sum(1, keepdims=True)
    return q, rng.dirichlet(np.ones(nx)), rng.dirichlet(np.ones(nz))


def test_kl_decomposition_matches_entropy_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        q, px, pz = _random_problem(rng, rng.integers(2, 9), rng.integers(2, 9), sparse=True)
        got = verify_kl_decomposition(q, px, pz)
        ref = kl_terms_by_entropies(q, px, pz)
        np.testing.assert_allclose(got, ref, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_kl_decomposition_property(nx, nz, seed):
    q, px, pz = _random_problem(np.random.default_rng(seed), nx, nz)
    lhs, mi, kl = verify_kl_decomposition(q, px, pz)
    assert mi >= -1e-12 and kl >= -1e-12
    assert abs(lhs - mi - kl) <= 1e-12


def test_kl_decomposition_degenerate_cases():
    # encoder ignores x: mutual information vanishes
    q = np.tile([0.2, 0.5, 0.3], (4, 1))
    lhs, mi, kl = verify_kl_decomposition(q, np.full(4, 0.25), np.array([0.2, 0.5, 0.3]))
    assert abs(mi) < 1e-15 and abs(kl) < 1e-15 and abs(lhs) < 1e-15
    with pytest.raises(ContractError):
        verify_kl_decomposition(np.array([[0.5, 0.6]]), np.array([1.0]), np.array([0.5, 0.5]))


def test_ep_closed_form_matches_quadrature():
    rng = np.random.default_rng(1)
    for beta in (0.5, 1.0, 2.0):
        y = rng.normal(0.3, 1.2, size=25)
        closed = float(ep_statistic(torch.tensor(y), beta))
        quad = ep_quadrature(y, beta, n_points=200_001)
        assert abs(closed - quad) <= 1e-6 * max(1.0, abs(quad))


def test_ep_single_point_at_origin():
    # m=1, y=0: 1 - 2/sqrt(1+b^2) + 1/sqrt(1+2b^2)
    b = 1.0
    expect = 1 - 2 / math.sqrt(2) + 1 / math.sqrt(3)
    assert abs(float(ep_statistic(torch.zeros(1, dtype=torch.float64), b)) - expect) < 1e-14


def test_ep_is_columnwise_and_nonnegative():
    y = torch.randn(40, 5, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    cols = ep_statistic(y)
    for r in range(5):
        assert torch.allclose(cols[r], ep_statistic(y[:, r]))
    assert (cols >= 0).all()
    with pytest.raises(ContractError):
        ep_statistic(torch.zeros(0, dtype=torch.float64))
    with pytest.raises(ContractError):
        ep_statistic(torch.zeros(3, dtype=torch.float64), beta=0.0)


def test_ep_gradient():
    y = torch.randn(12, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: ep_statistic(t, 0.7), (y,))


def test_sigreg_separates_gaussian_from_shifted():
    g = torch.Generator().manual_seed(0)
    null = sigreg(torch.randn(512, 16, generator=g, dtype=torch.float64), 16, generator=g)
    shifted = sigreg(torch.randn(512, 16, generator=g, dtype=torch.float64) + 0.5, 16, generator=g)
    assert shifted > 5 * null


def test_sigreg_fixed_directions_and_subsample():
    z = torch.randn(4, 3, 7, 8, dtype=torch.float64)
    d = random_directions(8, 5, torch.Generator().manual_seed(1))
    assert torch.allclose(d.norm(dim=0), torch.ones(5, dtype=torch.float64))
    a = sigreg(z, directions=d)
    tok = z.reshape(-1, 8)
    assert torch.allclose(a, ep_statistic(tok @ d).mean() / tok.shape[0])
    b = sigreg(z, directions=d, max_tokens=40, generator=torch.Generator().manual_seed(2))
    assert torch.isfinite(b)
    with pytest.raises(ContractError):
        sigreg(torch.zeros(3, 0))


def test_loss_ego_wraps_yaw():
    pred = torch.tensor([[0.0, 0.0, math.pi - 0.1]])
    tgt = torch.tensor([[3.0, 4.0, -math.pi + 0.1]])
    assert abs(float(loss_ego(pred, tgt)) - math.sqrt(25 + 0.04)) < 1e-5
    with pytest.raises(ContractError):
        loss_ego(torch.zeros(2, 3), torch.zeros(3, 3))


def test_uncertainty_map_hand_example():
    # 2x2 single-channel map, unit sigma, one invalid pixel
    pred = torch.tensor([[[1.0], [2.0]], [[0.0], [5.0]]], dtype=torch.float64)
    gt = torch.zeros_like(pred)
    sigma = torch.ones_like(pred)
    mask = torch.tensor([[[True], [True]], [[True], [False]]])
    # r = [[1,2],[0,5]]; valid (0,0): |1| + |0-1| (row) + |2-1| (col) = 3
    # (0,1): |2|, its row neighbor is invalid -> 2 ; (1,0): |0| -> 0
    expect = (3 + 2 + 0) / 3
    got = loss_uncertainty_map(pred, gt, sigma, mask, a=0.05)
    assert abs(float(got) - expect) < 1e-12
    sigma2 = sigma * 2
    got2 = loss_uncertainty_map(pred, gt, sigma2, mask, a=0.05)
    assert abs(float(got2) - (2 * expect - 0.05 * math.log(2))) < 1e-12


def test_uncertainty_map_rejects_nonpositive_sigma():
    x = torch.zeros(1, 2, 2, 1)
    with pytest.raises(ContractError):
        loss_uncertainty_map(x, x, torch.zeros(1, 2, 2, 1))
    with pytest.raises(ContractError):
        loss_uncertainty_map(x, torch.zeros(1, 2, 2, 3), torch.ones(1, 2, 2, 1))


def test_uncertainty_map_gradient():
    g = torch.Generator().manual_seed(3)
    pred = torch.randn(2, 5, 6, 3, dtype=torch.float64, generator=g, requires_grad=True)
    gt = torch.randn(2, 5, 6, 3, dtype=torch.float64, generator=g)
    sig = (torch.rand(2, 5, 6, 1, dtype=torch.float64, generator=g) + 0.5).requires_grad_()
    mask = torch.rand(2, 5, 6, 1, generator=g) > 0.2
    assert torch.autograd.gradcheck(lambda p, s: loss_uncertainty_map(p, gt, s, mask), (pred, sig))


def test_optimal_sigma_balances_log_term():
    # for one pixel the objective s*e - a*log s is minimized at s = a/e
    e, a = 0.25, 0.05
    s = torch.tensor(1.0, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.SGD([s], lr=0.05)
    pred = torch.full((1, 1, 1, 1), e, dtype=torch.float64)
    gt = torch.zeros_like(pred)
    for _ in range(3000):
        opt.zero_grad()
        loss_uncertainty_map(pred, gt, s.reshape(1, 1, 1, 1), a=a).backward()
        opt.step()
    assert abs(float(s.detach()) - a / e) < 1e-3


def test_loss_vis_components():
    g = torch.Generator().manual_seed(0)
    a = torch.rand(2, 16, 16, 3, generator=g)
    b = torch.rand(2, 16, 16, 3, generator=g)
    net = RandomFeaturePerceptual(seed=5)
    l1_only = loss_vis(a, b, ObjectiveConfig(perceptual="off"))
    assert torch.allclose(l1_only, (a - b).abs().mean())
    full = loss_vis(a, b, ObjectiveConfig(w_perceptual=2.0), net)
    assert torch.allclose(full, l1_only + 2.0 * net(a, b))
    assert float(loss_vis(a, a, ObjectiveConfig(), net)) == 0.0
    assert not any(p.requires_grad for p in net.parameters())
    with pytest.raises(ContractError):
        loss_vis(a * 2, b)


def test_total_objective_weights_and_stage():
    t = {"l_ego": 1.0, "l_depth": 2.0, "l_points": 3.0, "l_vis": 4.0, "sigreg": 100.0, "l_gen": 7.0}
    r1 = total_objective(t, 1, lam=0.01)
    assert r1.total == pytest.approx(11.0) and r1.l_gen == 0.0
    r2 = total_objective(t, 2, lam=0.01, step=5)
    assert r2.total == pytest.approx(18.0) and r2.step == 5
    assert '"total"' in r2.to_json()
    with pytest.raises(ContractError):
        total_objective({"l_ego": 1.0}, 1)
    with pytest.raises(ContractError):
        total_objective(t, 3)
