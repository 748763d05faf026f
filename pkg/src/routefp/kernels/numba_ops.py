"""Numba-compiled twins of the numpy kernels (same signatures, same layout).

Explicit loops beat BLAS dispatch at these matrix sizes (d=16, dh=32).
Compiled objects are cached on disk, so only the first process pays the
compile cost.
"""

from __future__ import annotations

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def toy_forward(proj, aW, ab, W1, b1, W2, b2, X):
    B = X.shape[0]
    L = aW.shape[0]
    d = aW.shape[1]
    d_in = proj.shape[1]
    dh = W1.shape[1]
    out = np.empty((B, d))
    xin = np.empty((B, L, d))
    h_all = np.empty((B, L, d))
    act = np.empty((B, L, dh))
    for bi in range(B):
        x = np.empty(d)
        for i in range(d):
            s = 0.0
            for j in range(d_in):
                s += proj[i, j] * X[bi, j]
            x[i] = s
        for l in range(L):
            for i in range(d):
                xin[bi, l, i] = x[i]
            h = np.empty(d)
            for i in range(d):
                s = ab[l, i]
                for j in range(d):
                    s += aW[l, i, j] * x[j]
                h[i] = x[i] + s
            for i in range(dh):
                s = b1[l, i]
                for j in range(d):
                    s += W1[l, i, j] * h[j]
                act[bi, l, i] = s if s > 0.0 else 0.0
            for i in range(d):
                s = b2[l, i]
                for j in range(dh):
                    s += W2[l, i, j] * act[bi, l, j]
                x[i] = h[i] + s
                h_all[bi, l, i] = h[i]
        for i in range(d):
            out[bi, i] = x[i]
    return out, xin, h_all, act


@njit(cache=True)
def toy_backward(aW, W1, W2, xin, h_all, act, gout):
    B = gout.shape[0]
    L = aW.shape[0]
    d = aW.shape[1]
    dh = W1.shape[1]
    gaW = np.zeros((L, d, d))
    gab = np.zeros((L, d))
    gW1 = np.zeros((L, dh, d))
    gb1 = np.zeros((L, dh))
    gW2 = np.zeros((L, d, dh))
    gb2 = np.zeros((L, d))
    for bi in range(B):
        g = np.empty(d)
        for i in range(d):
            g[i] = gout[bi, i]
        for l in range(L - 1, -1, -1):
            du = np.empty(dh)
            for j in range(dh):
                a = act[bi, l, j]
                if a > 0.0:
                    s = 0.0
                    for i in range(d):
                        s += g[i] * W2[l, i, j]
                    du[j] = s
                else:
                    du[j] = 0.0
            for i in range(d):
                gi = g[i]
                gb2[l, i] += gi
                for j in range(dh):
                    gW2[l, i, j] += gi * act[bi, l, j]
            dh_vec = np.empty(d)
            for i in range(d):
                s = g[i]
                for j in range(dh):
                    s += du[j] * W1[l, j, i]
                dh_vec[i] = s
            for j in range(dh):
                dj = du[j]
                gb1[l, j] += dj
                for i in range(d):
                    gW1[l, j, i] += dj * h_all[bi, l, i]
            for i in range(d):
                di = dh_vec[i]
                gab[l, i] += di
                for j in range(d):
                    gaW[l, i, j] += di * xin[bi, l, j]
            for i in range(d):
                s = dh_vec[i]
                for j in range(d):
                    s += dh_vec[j] * aW[l, j, i]
                g[i] = s
    return gaW, gab, gW1, gb1, gW2, gb2


@njit(cache=True)
def moe_forward(proj, aW, ab, W1, b1, W2, b2, bW1, bb1, bW2, bb2, rW, rb, tau, X):
    B = X.shape[0]
    L = aW.shape[0]
    d = aW.shape[1]
    d_in = proj.shape[1]
    dh = W1.shape[1]
    E = rW.shape[1]
    out = np.empty((B, d))
    h_all = np.empty((B, L, d))
    alpha_all = np.empty((B, L, E))
    act = np.empty((B, L, dh))
    w1 = np.empty((dh, d))
    v1 = np.empty(dh)
    w2 = np.empty((d, dh))
    v2 = np.empty(d)
    g = np.empty(E)
    for bi in range(B):
        x = np.empty(d)
        for i in range(d):
            s = 0.0
            for j in range(d_in):
                s += proj[i, j] * X[bi, j]
            x[i] = s
        for l in range(L):
            h = np.empty(d)
            for i in range(d):
                s = ab[l, i]
                for j in range(d):
                    s += aW[l, i, j] * x[j]
                h[i] = x[i] + s
                h_all[bi, l, i] = h[i]
            gmax = -np.inf
            for e in range(E):
                s = rb[l, e]
                for j in range(d):
                    s += rW[l, e, j] * h[j]
                g[e] = s / tau
                if g[e] > gmax:
                    gmax = g[e]
            z = 0.0
            for e in range(E):
                g[e] = np.exp(g[e] - gmax)
                z += g[e]
            for e in range(E):
                g[e] /= z
                alpha_all[bi, l, e] = g[e]
            # effective weights: base plus routing-weighted expert deltas
            for i in range(dh):
                v1[i] = b1[l, i]
                for j in range(d):
                    w1[i, j] = W1[l, i, j]
            for i in range(d):
                v2[i] = b2[l, i]
                for j in range(dh):
                    w2[i, j] = W2[l, i, j]
            for e in range(E):
                ge = g[e]
                for i in range(dh):
                    v1[i] += ge * bb1[l, e, i]
                    for j in range(d):
                        w1[i, j] += ge * bW1[l, e, i, j]
                for i in range(d):
                    v2[i] += ge * bb2[l, e, i]
                    for j in range(dh):
                        w2[i, j] += ge * bW2[l, e, i, j]
            for i in range(dh):
                s = v1[i]
                for j in range(d):
                    s += w1[i, j] * h[j]
                act[bi, l, i] = s if s > 0.0 else 0.0
            for i in range(d):
                s = v2[i]
                for j in range(dh):
                    s += w2[i, j] * act[bi, l, j]
                x[i] = h[i] + s
        for i in range(d):
            out[bi, i] = x[i]
    return out, h_all, alpha_all, act
