"""Backend selection for the hot loops.

The compiled extension ``rcp._ckernels`` is used when it imports; otherwise,
or when ``RCP_PURE_PYTHON=1`` is set, the NumPy fallback in
``rcp._kernels_py`` is used. ``BACKEND`` names the active choice.
"""

import os

import numpy as np

from rcp import _kernels_py

_py = _kernels_py

try:
    from rcp import _ckernels as _c
except ImportError:  # extension not built
    _c = None

if _c is not None and os.environ.get("RCP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    _impl = _c
    BACKEND = "cython"
else:
    _impl = _py
    BACKEND = "python"


def available_backends():
    return ["cython", "python"] if _c is not None else ["python"]


def get_backend(name=None):
    """Module implementing the kernels for ``name`` (default: active one)."""
    if name is None:
        return _impl
    if name == "python":
        return _py
    if name == "cython":
        if _c is None:
            raise ImportError("compiled kernels are not built")
        return _c
    raise ValueError(f"unknown backend {name!r}")


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def fps(points, count, seed, backend=None):
    return get_backend(backend).fps(_f64(points), count, seed)


def attention_update(gp, gq, cand, u, tau, backend=None):
    return get_backend(backend).attention_update(_f64(gp), _f64(gq), _i64(cand), _f64(u), float(tau))


def bilateral_update(fp, fq, cand, u, prev, sigma_f, sigma_u, backend=None):
    return get_backend(backend).bilateral_update(
        _f64(fp), _f64(fq), _i64(cand), _f64(u), _f64(prev), float(sigma_f), float(sigma_u)
    )


def hard_update(fp, fq, cand, u, prev, backend=None):
    return get_backend(backend).hard_update(_f64(fp), _f64(fq), _i64(cand), _f64(u), _f64(prev))


def jacobi_sweeps(x0, z, indptr, indices, lam, iters, backend=None):
    return get_backend(backend).jacobi_sweeps(
        _f64(x0), _f64(z), _i64(indptr), _i64(indices), float(lam), int(iters)
    )


def knn(points, queries, k, backend=None):
    return get_backend(backend).knn(_f64(points), _f64(queries), int(k))
