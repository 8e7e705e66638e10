"""Independent reference implementations: plain Python loops, no numpy algebra."""

from __future__ import annotations

import numpy as np


def matmul_loops(a, b):
    a, b = np.asarray(a), np.asarray(b)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def theta_loops(e, w):
    n, d = e.shape
    _, c, f = w.shape
    out = np.zeros((n, c, f))
    for i in range(n):
        for ci in range(c):
            for fi in range(f):
                s = 0.0
                for k in range(d):
                    s += e[i, k] * w[k, ci, fi]
                out[i, ci, fi] = s
    return out


def gcn_layer_loops(x, adj, theta, bias):
    n, c = x.shape
    f = theta.shape[2]
    h = np.zeros((n, c))
    for i in range(n):
        for ci in range(c):
            s = x[i, ci]
            for j in range(n):
                s += adj[i, j] * x[j, ci]
            h[i, ci] = s
    z = np.zeros((n, f))
    for i in range(n):
        for fi in range(f):
            s = bias[i, fi]
            for ci in range(c):
                s += h[i, ci] * theta[i, ci, fi]
            z[i, fi] = s
    return z


def weighted_mean_loops(values: list[np.ndarray], weights: list[float]) -> np.ndarray:
    total = float(sum(weights))
    flat = [np.asarray(v).ravel() for v in values]
    out = []
    for j in range(flat[0].size):
        s = 0.0
        for v, w in zip(flat, weights):
            s += (w / total) * float(v[j])
        out.append(s)
    return np.array(out).reshape(np.asarray(values[0]).shape)


def median_loops(values: list[np.ndarray]) -> np.ndarray:
    flat = [np.asarray(v).ravel() for v in values]
    out = []
    for j in range(flat[0].size):
        col = sorted(float(v[j]) for v in flat)
        m = len(col)
        out.append(col[m // 2] if m % 2 else 0.5 * (col[m // 2 - 1] + col[m // 2]))
    return np.array(out).reshape(np.asarray(values[0]).shape)


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar f at x by central differences, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        up = f(x)
        flat[j] = orig - h
        down = f(x)
        flat[j] = orig
        gf[j] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-6) -> float:
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
