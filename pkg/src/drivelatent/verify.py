"""Fast oracle cross-checks behind the ``verify`` CLI verb.

Each suite returns ``(name, passed, detail)``.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from . import oracles
from .evaluation import chamfer, knn_avg_distance, laplacian_smoothness, local_pca_ratio
from .generation import euler_sample
from .objectives import ep_statistic, verify_kl_decomposition


def kl_suite(trials=200, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        nx, nz = rng.integers(1, 9, size=2)
        q = rng.dirichlet(np.ones(nz), size=nx)
        px, pz = rng.dirichlet(np.ones(nx)), rng.dirichlet(np.ones(nz))
        lhs, mi, kl = verify_kl_decomposition(q, px, pz)
        ref = oracles.kl_terms_by_entropies(q, px, pz)
        worst = max(worst, abs(lhs - mi - kl), *np.abs(np.subtract((lhs, mi, kl), ref)))
    return "kl-decomposition", worst <= 1e-12, f"max gap {worst:.2e}"


def ep_suite(trials=5, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        y = rng.normal(rng.uniform(-1, 1), rng.uniform(0.5, 2), size=rng.integers(2, 65))
        beta = float(rng.choice([0.5, 1.0, 2.0]))
        closed = float(ep_statistic(torch.as_tensor(y), beta))
        worst = max(worst, abs(closed - oracles.ep_quadrature(y, beta, n_points=200_001)))
    return "epps-pulley", worst <= 1e-3, f"max error {worst:.2e}"


def chamfer_suite(trials=10, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        a, b = rng.normal(size=(200, 3)), rng.normal(size=(200, 3))
        r = chamfer(a, b)
        worst = max(worst, *np.abs(np.subtract((r.acc, r.comp, r.overall), oracles.chamfer_bruteforce(a, b))))
    return "chamfer", worst <= 1e-9, f"max error {worst:.2e}"


def smoothness_suite(seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(100, 4))
    _, d = oracles.knn_bruteforce(X, 5)
    ok = abs(knn_avg_distance(X, 5) - d.mean()) < 1e-12
    ok &= abs(laplacian_smoothness(X, 5) - oracles.laplacian_bruteforce(X, 5)) < 1e-9
    ok &= abs(knn_avg_distance(np.array([[0.0], [1.0], [2.0]]), 2) - 4 / 3) < 1e-15
    ok &= abs(local_pca_ratio(np.outer(np.arange(20.0), [1, 2, 3]), 5, 1) - 1.0) < 1e-9
    return "smoothness", bool(ok), "kNN, Laplacian and PCA references"


def euler_suite():
    x0 = torch.ones(1, dtype=torch.float64)
    errs = [abs(float(euler_sample(lambda x, t: -x, (1,), s, x_init=x0)) - math.exp(-1)) for s in (10, 100)]
    const = float(euler_sample(lambda x, t: torch.full_like(x, 0.3), (1,), 7, x_init=x0))
    ratio = errs[0] / errs[1]
    ok = abs(const - 1.3) < 1e-12 and 5 <= ratio <= 15
    return "euler", ok, f"error ratio 10/100 steps = {ratio:.2f}"


def run_all():
    return [kl_suite(), ep_suite(), chamfer_suite(), smoothness_suite(), euler_suite()]
