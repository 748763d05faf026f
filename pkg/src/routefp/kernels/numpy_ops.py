"""Pure-numpy reference implementations of the hot kernels.

Array layout (shared with the numba backend):
  proj (d, d_in)          fixed input projection
  aW (L, d, d), ab (L, d)                 attention-analog sublayer
  W1 (L, dh, d), b1 (L, dh), W2 (L, d, dh), b2 (L, d)   MLP sublayer
  bank_* (L, E, ...)      per-layer expert MLP deltas
  rW (L, E, d), rb (L, E) routers
  X (B, d_in)             input batch
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def toy_forward(proj, aW, ab, W1, b1, W2, b2, X):
    """Forward pass keeping every intermediate needed by the backward pass.

    Returns (out, xin, h, act): final features (B, d), block inputs
    (B, L, d), pre-MLP features (B, L, d), post-ReLU hidden (B, L, dh).
    """
    B = X.shape[0]
    L, d = aW.shape[0], aW.shape[1]
    dh = W1.shape[1]
    xin = np.empty((B, L, d))
    h_all = np.empty((B, L, d))
    act = np.empty((B, L, dh))
    x = X @ proj.T
    for l in range(L):
        xin[:, l] = x
        h = x + x @ aW[l].T + ab[l]
        u = h @ W1[l].T + b1[l]
        a = np.maximum(u, 0.0)
        x = h + a @ W2[l].T + b2[l]
        h_all[:, l] = h
        act[:, l] = a
    return x, xin, h_all, act


def toy_backward(aW, W1, W2, xin, h_all, act, gout):
    """Gradients of all block parameters, summed over the batch.

    gout is the gradient w.r.t. the final features (B, d). Returns
    (gaW, gab, gW1, gb1, gW2, gb2) with the parameter layouts above.
    """
    L = aW.shape[0]
    gaW = np.empty_like(aW)
    gab = np.empty((L, aW.shape[1]))
    gW1 = np.empty_like(W1)
    gb1 = np.empty((L, W1.shape[1]))
    gW2 = np.empty_like(W2)
    gb2 = np.empty((L, W2.shape[1]))
    g = gout
    for l in range(L - 1, -1, -1):
        a = act[:, l]
        h = h_all[:, l]
        x = xin[:, l]
        gW2[l] = g.T @ a
        gb2[l] = g.sum(axis=0)
        da = g @ W2[l]
        du = da * (a > 0.0)
        gW1[l] = du.T @ h
        gb1[l] = du.sum(axis=0)
        dh = g + du @ W1[l]
        gaW[l] = dh.T @ x
        gab[l] = dh.sum(axis=0)
        g = dh + dh @ aW[l]
    return gaW, gab, gW1, gb1, gW2, gb2


def moe_forward(proj, aW, ab, W1, b1, W2, b2, bW1, bb1, bW2, bb2, rW, rb, tau, X):
    """Merged-MoE forward with per-sample weight-space expert fusion.

    At each layer the router softmax over experts mixes the MLP deltas into
    effective weights before the nonlinearity. Returns (out, h, alpha, act):
    final features (B, d), pre-MLP features (B, L, d), routing weights
    (B, L, E), post-ReLU hidden (B, L, dh).
    """
    B = X.shape[0]
    L, d = aW.shape[0], aW.shape[1]
    dh = W1.shape[1]
    E = rW.shape[1]
    h_all = np.empty((B, L, d))
    alpha_all = np.empty((B, L, E))
    act = np.empty((B, L, dh))
    x = X @ proj.T
    for l in range(L):
        h = x + x @ aW[l].T + ab[l]
        g = (h @ rW[l].T + rb[l]) / tau
        g = g - g.max(axis=1, keepdims=True)
        e = np.exp(g)
        alpha = e / e.sum(axis=1, keepdims=True)
        w1 = W1[l] + np.tensordot(alpha, bW1[l], axes=(1, 0))
        v1 = b1[l] + alpha @ bb1[l]
        w2 = W2[l] + np.tensordot(alpha, bW2[l], axes=(1, 0))
        v2 = b2[l] + alpha @ bb2[l]
        u = np.einsum("bij,bj->bi", w1, h) + v1
        a = np.maximum(u, 0.0)
        x = h + np.einsum("bij,bj->bi", w2, a) + v2
        h_all[:, l] = h
        alpha_all[:, l] = alpha
        act[:, l] = a
    return x, h_all, alpha_all, act
