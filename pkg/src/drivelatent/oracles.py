"""Slow, independent reference computations used to cross-check the fast paths.

Nothing here imports the implementations it checks.
"""

from __future__ import annotations

import math

import numpy as np


def chamfer_bruteforce(pred, gt):
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    d = np.sqrt(((pred[:, None, :] - gt[None, :, :]) ** 2).sum(-1))
    acc = d.min(axis=1).mean()
    comp = d.min(axis=0).mean()
    return acc, comp, (acc + comp) / 2


def ep_quadrature(y, beta, n_points=1_000_000, half_width=12.0):
    """``m * integral |phi_hat(t) - exp(-t^2/2)|^2 N(t; 0, beta^2) dt`` by the
    trapezoid rule on ``n_points`` nodes over +-``half_width`` standard deviations."""
    y = np.asarray(y, np.float64)
    m = len(y)
    t = np.linspace(-half_width * beta, half_width * beta, n_points)
    w = np.exp(-0.5 * (t / beta) ** 2) / (beta * math.sqrt(2 * math.pi))
    re = np.zeros_like(t)
    im = np.zeros_like(t)
    for yj in y:
        re += np.cos(t * yj)
        im += np.sin(t * yj)
    re /= m
    im /= m
    f = ((re - np.exp(-0.5 * t * t)) ** 2 + im * im) * w
    return m * np.trapezoid(f, t) if hasattr(np, "trapezoid") else m * np.trapz(f, t)


def kl_terms_by_entropies(q, px, pz):
    """(E KL(q(z|x)||p), I_q, KL(q_agg||p)) via entropies and cross-entropies."""
    q = np.asarray(q, np.float64)
    px = np.asarray(px, np.float64)
    pz = np.asarray(pz, np.float64)

    def H(p):
        p = p[p > 0]
        return -np.sum(p * np.log(p))

    def cross(p, r):
        nz = p > 0
        return -np.sum(p[nz] * np.log(r[nz]))

    qa = px @ q
    h_cond = sum(px[i] * H(q[i]) for i in range(len(px)))
    ce_cond = sum(px[i] * cross(q[i], pz) for i in range(len(px)))
    return ce_cond - h_cond, H(qa) - h_cond, cross(qa, pz) - H(qa)


def knn_bruteforce(X, k):
    """Neighbor indices (N, k) by full distance sort, self excluded."""
    X = np.asarray(X, np.float64)
    d = np.sqrt(((X[:, None] - X[None]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(d, idx, 1)


def laplacian_bruteforce(X, k):
    """``tr(X^T L X)`` of the symmetrized unweighted kNN adjacency."""
    X = np.asarray(X, np.float64)
    idx, _ = knn_bruteforce(X, k)
    N = len(X)
    A = np.zeros((N, N))
    for i in range(N):
        A[i, idx[i]] = 1
    A = np.maximum(A, A.T)
    L = np.diag(A.sum(1)) - A
    return float(np.trace(X.T @ L @ X))


def softmax_rows(a):
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def gelu(x):
    from math import erf
    return 0.5 * x * (1 + np.vectorize(erf)(x / math.sqrt(2)))


def attention_block_reference(x, p, heads, mask=None, pos=None):
    """Pre-norm block ``x + Attn(LN(x) + pos); x + MLP(LN(x))`` on one (N, C) sequence.

    ``p`` maps parameter names (``norm1.weight``, ``attn.qkv.weight``, ...)
    to numpy arrays.
    """
    N, C = x.shape
    dh = C // heads
    h = layer_norm(x, p["norm1.weight"], p["norm1.bias"])
    if pos is not None:
        h = h + pos
    qkv = h @ p["attn.qkv.weight"].T + p["attn.qkv.bias"]
    q, k, v = qkv[:, :C], qkv[:, C:2 * C], qkv[:, 2 * C:]
    out = np.zeros((N, C))
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        if mask is not None:
            s = np.where(mask, s, -np.inf)
        out[:, sl] = softmax_rows(s) @ v[:, sl]
    x = x + out @ p["attn.proj.weight"].T + p["attn.proj.bias"]
    h = layer_norm(x, p["norm2.weight"], p["norm2.bias"])
    h = gelu(h @ p["mlp.0.weight"].T + p["mlp.0.bias"])
    return x + h @ p["mlp.2.weight"].T + p["mlp.2.bias"]


def sinusoid_reference(n, dim, max_period=10000.0):
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = np.arange(n)[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def euler_linear_error(steps, x0=1.0):
    """|Euler result - exact| for dx/d(-tau) = -x integrated over tau in [1, 0]."""
    return abs(x0 * (1 - 1 / steps) ** steps - x0 * math.exp(-1))
