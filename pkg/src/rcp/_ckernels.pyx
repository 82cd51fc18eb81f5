# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the per-point hot loops.

Signatures and reduction order mirror ``_kernels_py``. All loops run without
the GIL so callers may drive independent problems from several threads.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, INFINITY

cnp.import_array()


def fps(const double[:, ::1] points, Py_ssize_t count, Py_ssize_t seed):
    cdef Py_ssize_t m = points.shape[0]
    out_arr = np.empty(count, dtype=np.int64)
    mind_arr = np.empty(m, dtype=np.float64)
    cdef long long[::1] out = out_arr
    cdef double[::1] mind = mind_arr
    cdef Py_ssize_t i, s, cur = seed, nxt
    cdef double dx, dy, dz, d, best
    with nogil:
        out[0] = seed
        for i in range(m):
            dx = points[i, 0] - points[cur, 0]
            dy = points[i, 1] - points[cur, 1]
            dz = points[i, 2] - points[cur, 2]
            mind[i] = dx * dx + dy * dy + dz * dz
        for s in range(1, count):
            best = -1.0
            nxt = 0
            for i in range(m):
                if mind[i] > best:
                    best = mind[i]
                    nxt = i
            out[s] = nxt
            for i in range(m):
                dx = points[i, 0] - points[nxt, 0]
                dy = points[i, 1] - points[nxt, 1]
                dz = points[i, 2] - points[nxt, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < mind[i]:
                    mind[i] = d
    return out_arr


def attention_update(const double[:, ::1] gp, const double[:, ::1] gq,
                     const long long[:, ::1] cand, const double[:, :, ::1] u,
                     double tau):
    cdef Py_ssize_t m = cand.shape[0], k = cand.shape[1], e = gp.shape[1]
    z_arr = np.zeros((m, 3), dtype=np.float64)
    w_arr = np.empty((m, k), dtype=np.float64)
    cdef double[:, ::1] z = z_arr
    cdef double[:, ::1] w = w_arr
    cdef Py_ssize_t i, j, c, n
    cdef double acc, top, total
    with nogil:
        for i in range(m):
            top = -INFINITY
            for j in range(k):
                n = cand[i, j]
                acc = 0.0
                for c in range(e):
                    acc = acc + gp[i, c] * gq[n, c]
                acc = acc / tau
                w[i, j] = acc
                if acc > top:
                    top = acc
            total = 0.0
            for j in range(k):
                w[i, j] = exp(w[i, j] - top)
                total = total + w[i, j]
            for j in range(k):
                w[i, j] = w[i, j] / total
                z[i, 0] = z[i, 0] + w[i, j] * u[i, j, 0]
                z[i, 1] = z[i, 1] + w[i, j] * u[i, j, 1]
                z[i, 2] = z[i, 2] + w[i, j] * u[i, j, 2]
    return z_arr, w_arr


cdef inline double _fdist(const double[:, ::1] fp, const double[:, ::1] fq,
                          Py_ssize_t i, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t c
    cdef double acc = 0.0, t
    for c in range(fp.shape[1]):
        t = fp[i, c] - fq[n, c]
        acc = acc + t * t
    return sqrt(acc)


cdef inline double _udist(const double[:, :, ::1] u, const double[:, ::1] prev,
                          Py_ssize_t i, Py_ssize_t j) noexcept nogil:
    cdef double a = u[i, j, 0] - prev[i, 0]
    cdef double b = u[i, j, 1] - prev[i, 1]
    cdef double c = u[i, j, 2] - prev[i, 2]
    return sqrt(a * a + b * b + c * c)


def bilateral_update(const double[:, ::1] fp, const double[:, ::1] fq,
                     const long long[:, ::1] cand, const double[:, :, ::1] u,
                     const double[:, ::1] prev, double sigma_f, double sigma_u):
    cdef Py_ssize_t m = cand.shape[0], k = cand.shape[1]
    z_arr = np.zeros((m, 3), dtype=np.float64)
    tot_arr = np.zeros(m, dtype=np.float64)
    flag_arr = np.zeros(m, dtype=np.bool_)
    cdef double[:, ::1] z = z_arr
    cdef double[::1] tot = tot_arr
    cdef cnp.npy_bool[::1] flag = flag_arr
    cdef Py_ssize_t i, j
    cdef double wt, s, ax, ay, az
    with nogil:
        for i in range(m):
            s = 0.0
            ax = 0.0
            ay = 0.0
            az = 0.0
            for j in range(k):
                wt = exp(-_fdist(fp, fq, i, cand[i, j]) / sigma_f - _udist(u, prev, i, j) / sigma_u)
                s = s + wt
                ax = ax + wt * u[i, j, 0]
                ay = ay + wt * u[i, j, 1]
                az = az + wt * u[i, j, 2]
            tot[i] = s
            if s > 0.0:
                z[i, 0] = ax / s
                z[i, 1] = ay / s
                z[i, 2] = az / s
            else:
                flag[i] = 1
                z[i, 0] = u[i, 0, 0]
                z[i, 1] = u[i, 0, 1]
                z[i, 2] = u[i, 0, 2]
    return z_arr, tot_arr, flag_arr


def hard_update(const double[:, ::1] fp, const double[:, ::1] fq,
                const long long[:, ::1] cand, const double[:, :, ::1] u,
                const double[:, ::1] prev):
    cdef Py_ssize_t m = cand.shape[0], k = cand.shape[1]
    z_arr = np.empty((m, 3), dtype=np.float64)
    pick_arr = np.empty(m, dtype=np.int64)
    cdef double[:, ::1] z = z_arr
    cdef long long[::1] pick = pick_arr
    cdef Py_ssize_t i, j, bj
    cdef double obj, best
    with nogil:
        for i in range(m):
            best = INFINITY
            bj = 0
            for j in range(k):
                obj = _fdist(fp, fq, i, cand[i, j]) + _udist(u, prev, i, j)
                if obj < best or (obj == best and cand[i, j] < cand[i, bj]):
                    best = obj
                    bj = j
            pick[i] = cand[i, bj]
            z[i, 0] = u[i, bj, 0]
            z[i, 1] = u[i, bj, 1]
            z[i, 2] = u[i, bj, 2]
    return z_arr, pick_arr


def jacobi_sweeps(const double[:, ::1] x0, const double[:, ::1] z,
                  const long long[::1] indptr, const long long[::1] indices,
                  double lam, Py_ssize_t iters):
    cdef Py_ssize_t m = z.shape[0]
    x_arr = np.array(x0, dtype=np.float64, copy=True)
    nxt_arr = np.empty_like(x_arr)
    cdef double[:, ::1] x = x_arr
    cdef double[:, ::1] nxt = nxt_arr
    cdef double[:, ::1] tmp
    cdef Py_ssize_t it, i, p, j
    cdef double ax, ay, az, denom
    with nogil:
        for it in range(iters):
            for i in range(m):
                ax = 0.0
                ay = 0.0
                az = 0.0
                for p in range(indptr[i], indptr[i + 1]):
                    j = indices[p]
                    ax = ax + x[j, 0]
                    ay = ay + x[j, 1]
                    az = az + x[j, 2]
                denom = 1.0 + lam * (indptr[i + 1] - indptr[i])
                nxt[i, 0] = (z[i, 0] + lam * ax) / denom
                nxt[i, 1] = (z[i, 1] + lam * ay) / denom
                nxt[i, 2] = (z[i, 2] + lam * az) / denom
            tmp = x
            x = nxt
            nxt = tmp
    return np.asarray(x)


def knn(const double[:, ::1] points, const double[:, ::1] queries, Py_ssize_t k):
    cdef Py_ssize_t n = points.shape[0], m = queries.shape[0]
    idx_arr = np.empty((m, k), dtype=np.int64)
    d2_arr = np.empty((m, k), dtype=np.float64)
    cdef long long[:, ::1] idx = idx_arr
    cdef double[:, ::1] d2 = d2_arr
    cdef Py_ssize_t i, j, pos, filled
    cdef double qx, qy, qz, dx, dy, dz, d, worst
    with nogil:
        for i in range(m):
            qx = queries[i, 0]
            qy = queries[i, 1]
            qz = queries[i, 2]
            filled = 0
            worst = INFINITY
            for j in range(n):
                dx = points[j, 0] - qx
                dy = points[j, 1] - qy
                dz = points[j, 2] - qz
                d = dx * dx + dy * dy
                d = d + dz * dz
                if d >= worst:
                    continue
                pos = filled if filled < k else k - 1
                # shift strictly larger entries right; equal ones keep precedence
                while pos > 0 and d2[i, pos - 1] > d:
                    d2[i, pos] = d2[i, pos - 1]
                    idx[i, pos] = idx[i, pos - 1]
                    pos = pos - 1
                d2[i, pos] = d
                idx[i, pos] = j
                if filled < k:
                    filled = filled + 1
                if filled == k:
                    worst = d2[i, k - 1]
    return idx_arr, d2_arr
