"""Independent oracles and check utilities shared by the test modules.

Everything here recomputes expected values by brute force (nested loops,
exhaustive enumeration, finite differences) so the tests never reuse the
code paths they are checking.
"""

import itertools
import math

import numpy as np


def naive_conv2d(x, kernels, bias, padding):
    """Six-nested-loop convolution oracle."""
    k = kernels.shape[0]
    cin, cout = kernels.shape[2], kernels.shape[3]
    if padding == "same":
        p = (k - 1) // 2
        x = np.pad(x, ((p, p), (p, p), (0, 0)))
    H, W = x.shape[0], x.shape[1]
    Ho, Wo = H - k + 1, W - k + 1
    out = np.zeros((Ho, Wo, cout))
    for i in range(Ho):
        for j in range(Wo):
            for co in range(cout):
                acc = bias[co] if bias is not None else 0.0
                for ki in range(k):
                    for kj in range(k):
                        for ci in range(cin):
                            acc += x[i + ki, j + kj, ci] * kernels[ki, kj, ci, co]
                out[i, j, co] = acc
    return out


def naive_maxpool2x2(x):
    H, W, C = x.shape
    out = np.zeros((H // 2, W // 2, C))
    for i in range(H // 2):
        for j in range(W // 2):
            for c in range(C):
                window = [
                    x[2 * i, 2 * j, c],
                    x[2 * i, 2 * j + 1, c],
                    x[2 * i + 1, 2 * j, c],
                    x[2 * i + 1, 2 * j + 1, c],
                ]
                out[i, j, c] = max(window)
    return out


def central_diff(fn, x, eps=1e-4):
    """Central finite-difference gradient of scalar fn at array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(x)
        flat[i] = orig - eps
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def max_rel_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def brute_force_weight_map(mask, w0=10.0, sigma=5.0, class_balance=True):
    """Enumerate edge pixels, take the two smallest distinct-pixel distances."""
    mask = np.asarray(mask)
    H, W = mask.shape
    if class_balance:
        freq1 = mask.mean()
        wc = np.where(
            mask == 1,
            0.5 / freq1 if freq1 > 0 else 1.0,
            0.5 / (1 - freq1) if freq1 < 1 else 1.0,
        )
    else:
        wc = np.ones((H, W), dtype=np.float64)
    edges = []
    for i in range(H):
        for j in range(W):
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ii, jj = i + di, j + dj
                if 0 <= ii < H and 0 <= jj < W and mask[ii, jj] != mask[i, j]:
                    edges.append((i, j))
                    break
    if not edges:
        return wc.astype(np.float64)
    out = np.empty((H, W))
    for i in range(H):
        for j in range(W):
            dists = sorted(math.sqrt((i - ei) ** 2 + (j - ej) ** 2) for ei, ej in edges)
            d1, d2 = dists[0], dists[1]
            out[i, j] = wc[i, j] + w0 * np.exp(-(d1 + d2) / (2 * sigma**2)) ** 2
    return out


def qp_dual_optimum(K, y, C):
    """Exact C-SVM dual optimum by active-set enumeration (n <= ~10).

    Every pattern assigns each alpha to {0, C, free}; free variables solve the
    equality-constrained stationarity system. Returns (best objective, alpha).
    """
    n = len(y)
    Q = (y[:, None] * y[None, :]) * K
    best_obj, best_alpha = None, None
    for pattern in itertools.product((0, 1, 2), repeat=n):
        pattern = np.asarray(pattern)
        free = np.flatnonzero(pattern == 2)
        alpha = np.where(pattern == 1, C, 0.0)
        if len(free):
            nf = len(free)
            A = np.zeros((nf + 1, nf + 1))
            A[:nf, :nf] = Q[np.ix_(free, free)]
            A[:nf, nf] = y[free]
            A[nf, :nf] = y[free]
            rhs = np.empty(nf + 1)
            rhs[:nf] = 1.0 - Q[np.ix_(free, np.flatnonzero(pattern == 1))].sum(axis=1) * C
            rhs[nf] = -float(y @ alpha)
            sol, residual, *_ = np.linalg.lstsq(A, rhs, rcond=None)
            if np.abs(A @ sol - rhs).max() > 1e-8 * max(1.0, C):
                continue  # inconsistent stationarity system; not this face
            a_free = sol[:nf]
            if a_free.min() < -1e-9 * max(1.0, C) or a_free.max() > C * (1 + 1e-9):
                continue
            alpha[free] = np.clip(a_free, 0.0, C)
        if abs(float(y @ alpha)) > 1e-7 * max(1.0, C):
            continue
        obj = float(alpha.sum() - 0.5 * alpha @ Q @ alpha)
        if best_obj is None or obj > best_obj:
            best_obj, best_alpha = obj, alpha
    return best_obj, best_alpha


def qp_bias(K, y, C, alpha, tol=1e-8):
    """Bias consistent with the oracle alphas (free-SV average, else midpoint)."""
    E = K @ (alpha * y)
    free = (alpha > tol * max(1.0, C)) & (alpha < C - tol * max(1.0, C))
    yg = y - E
    if free.any():
        return float(yg[free].mean())
    pos = y > 0
    at_hi = alpha >= C - tol * max(1.0, C)
    at_lo = alpha <= tol * max(1.0, C)
    up = (pos & ~at_hi) | (~pos & ~at_lo)
    low = (~pos & ~at_hi) | (pos & ~at_lo)
    hi = yg[up].max() if up.any() else yg.min()
    lo = yg[low].min() if low.any() else yg.max()
    return float((hi + lo) / 2)
