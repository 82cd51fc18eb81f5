"""NumPy implementations of the hot loops.

Used when the compiled extension is unavailable or ``RCP_PURE_PYTHON=1``.
Every function here has a twin in ``_ckernels.pyx`` with the same signature
and the same per-point reduction order.
"""

import numpy as np


def fps(points, count, seed):
    m = points.shape[0]
    out = np.empty(count, dtype=np.int64)
    out[0] = seed
    diff = points - points[seed]
    mind = np.einsum("ij,ij->i", diff, diff)
    for s in range(1, count):
        nxt = int(np.argmax(mind))
        out[s] = nxt
        diff = points - points[nxt]
        np.minimum(mind, np.einsum("ij,ij->i", diff, diff), out=mind)
    return out


def attention_update(gp, gq, cand, u, tau):
    logits = np.einsum("mc,mkc->mk", gp, gq[cand]) / tau
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("mk,mkc->mc", w, u), w


def bilateral_update(fp, fq, cand, u, prev, sigma_f, sigma_u):
    fd = np.linalg.norm(fp[:, None, :] - fq[cand], axis=2)
    ud = np.linalg.norm(u - prev[:, None, :], axis=2)
    w = np.exp(-fd / sigma_f - ud / sigma_u)
    total = w.sum(axis=1)
    z = np.empty((cand.shape[0], 3))
    ok = total > 0.0
    z[ok] = np.einsum("mk,mkc->mc", w[ok], u[ok]) / total[ok, None]
    z[~ok] = u[~ok, 0]
    return z, total, ~ok


def hard_update(fp, fq, cand, u, prev):
    obj = np.linalg.norm(fp[:, None, :] - fq[cand], axis=2) + np.linalg.norm(
        u - prev[:, None, :], axis=2
    )
    best = obj.min(axis=1, keepdims=True)
    # among exact minima prefer the lowest target index
    masked = np.where(obj == best, cand, np.iinfo(np.int64).max)
    pos = np.argmin(masked, axis=1)
    rows = np.arange(cand.shape[0])
    return u[rows, pos].copy(), cand[rows, pos].copy()


def jacobi_sweeps(x0, z, indptr, indices, lam, iters):
    x = x0.copy()
    deg = np.diff(indptr).astype(np.float64)
    rows = np.repeat(np.arange(len(deg)), np.diff(indptr))
    denom = 1.0 + lam * deg
    for _ in range(iters):
        acc = np.zeros_like(x)
        np.add.at(acc, rows, x[indices])
        x = (z + lam * acc) / denom[:, None]
    return x


def knn(points, queries, k, chunk=256):
    m = queries.shape[0]
    idx = np.empty((m, k), dtype=np.int64)
    d2 = np.empty((m, k))
    for s in range(0, m, chunk):
        q = queries[s:s + chunk]
        dx = points[None, :, 0] - q[:, None, 0]
        dy = points[None, :, 1] - q[:, None, 1]
        dz = points[None, :, 2] - q[:, None, 2]
        d = dx * dx + dy * dy
        d = d + dz * dz
        # stable sort: equal distances stay in index order
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        idx[s:s + chunk] = order
        d2[s:s + chunk] = np.take_along_axis(d, order, 1)
    return idx, d2
