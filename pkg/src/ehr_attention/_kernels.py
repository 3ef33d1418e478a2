"""Fused row-wise kernels for softmax and layer normalization.

Both operate on C-contiguous 2-D float64 arrays, one row per normalized slice.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def softmax_rows(x):
    n, m = x.shape
    out = np.empty_like(x)
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            e = math.exp(x[i, j] - mx)
            out[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(m):
            out[i, j] *= inv
    return out


@njit(cache=True)
def softmax_rows_grad(y, g):
    n, m = y.shape
    out = np.empty_like(y)
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += g[i, j] * y[i, j]
        for j in range(m):
            out[i, j] = y[i, j] * (g[i, j] - dot)
    return out


@njit(cache=True)
def layer_norm_rows(x, gamma, beta, eps):
    n, m = x.shape
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    inv_std = np.empty(n)
    for i in range(n):
        mu = 0.0
        for j in range(m):
            mu += x[i, j]
        mu /= m
        var = 0.0
        for j in range(m):
            c = x[i, j] - mu
            var += c * c
        var /= m
        r = 1.0 / math.sqrt(var + eps)
        inv_std[i] = r
        for j in range(m):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            out[i, j] = h * gamma[j] + beta[j]
    return out, xhat, inv_std


@njit(cache=True)
def layer_norm_rows_grad(g, xhat, inv_std, gamma):
    n, m = g.shape
    dx = np.empty_like(g)
    dgamma = np.zeros(m)
    dbeta = np.zeros(m)
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(m):
            d = g[i, j] * gamma[j]
            s1 += d
            s2 += d * xhat[i, j]
            dgamma[j] += g[i, j] * xhat[i, j]
            dbeta[j] += g[i, j]
        r = inv_std[i] / m
        for j in range(m):
            d = g[i, j] * gamma[j]
            dx[i, j] = r * (m * d - s1 - xhat[i, j] * s2)
    return dx, dgamma, dbeta
