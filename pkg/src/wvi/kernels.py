"""Numeric hot loops with a numba fast path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``WVI_PURE_NUMPY`` is unset (or "0"). Both implementations are
kept importable so they can be compared directly in tests and in
``benchmarks/bench_kernels.py``.
"""

import os

import numpy as np

_PURE_NUMPY_ENV = "WVI_PURE_NUMPY"


def _want_numba() -> bool:
    return os.environ.get(_PURE_NUMPY_ENV, "0").strip() not in ("1", "true", "yes")


try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and _want_numba()

# Status codes returned by the Sinkhorn scaling loop.
SINKHORN_OK = 0
SINKHORN_UNDERFLOW = 1


def pairwise_sqdist_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of a (n,d) and b (m,d).

    Uses explicit differences so that identical rows give exactly 0.0
    (the |a|^2+|b|^2-2ab identity loses that under cancellation).
    Memory is O(n*m*d); intended for minibatch-scale inputs.
    """
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def min_sqdist_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each row of a, the smallest squared distance to any row of b.

    Chunked |a|^2+|b|^2-2ab form: O(chunk*m) memory, fine for nearest
    neighbour search where exact zeros do not matter.
    """
    b_sq = np.einsum("ij,ij->i", b, b)
    out = np.empty(a.shape[0])
    chunk = max(1, int(2**22 // max(b.shape[0], 1)))
    for start in range(0, a.shape[0], chunk):
        part = a[start : start + chunk]
        d = np.einsum("ij,ij->i", part, part)[:, None] + b_sq[None, :] - 2.0 * (part @ b.T)
        out[start : start + chunk] = np.maximum(d, 0.0).min(axis=1)
    return out


def sinkhorn_scalings_numpy(K, r, c, iterations, stop_tol):
    """Alternating scaling loop u=r/(Kv), v=c/(K^T u).

    Returns (u, v, iterations_run, status). The final v is recomputed from
    the final u, so the column marginals of diag(u) K diag(v) match c
    exactly and the residual violation sits in the rows. stop_tol <= 0
    disables the early-stop check.
    """
    floor = 1e-300
    u = r.copy()
    v = np.empty_like(c)
    done = 0
    for it in range(iterations):
        a = K.T @ u
        if a.min() < floor:
            return u, v, done, SINKHORN_UNDERFLOW
        v = c / a
        b = K @ v
        if b.min() < floor:
            return u, v, done, SINKHORN_UNDERFLOW
        viol = np.abs(u * b - r).max()
        u = r / b
        done = it + 1
        if stop_tol > 0.0 and viol <= stop_tol:
            break
    a = K.T @ u
    if a.min() < floor:
        return u, v, done, SINKHORN_UNDERFLOW
    v = c / a
    return u, v, done, SINKHORN_OK


if _HAVE_NUMBA:

    @njit(cache=True)
    def pairwise_sqdist_numba(a, b):
        n, m, d = a.shape[0], b.shape[0], a.shape[1]
        out = np.empty((n, m))
        for i in range(n):
            for j in range(m):
                s = 0.0
                for k in range(d):
                    diff = a[i, k] - b[j, k]
                    s += diff * diff
                out[i, j] = s
        return out

    @njit(cache=True)
    def min_sqdist_numba(a, b):
        n, m, d = a.shape[0], b.shape[0], a.shape[1]
        out = np.empty(n)
        for i in range(n):
            best = np.inf
            for j in range(m):
                s = 0.0
                for k in range(d):
                    diff = a[i, k] - b[j, k]
                    s += diff * diff
                    if s >= best:
                        break
                if s < best:
                    best = s
            out[i] = best
        return out

    @njit(cache=True)
    def sinkhorn_scalings_numba(K, r, c, iterations, stop_tol):
        floor = 1e-300
        n, m = K.shape
        u = r.copy()
        v = np.empty(m)
        done = 0
        for it in range(iterations):
            for j in range(m):
                s = 0.0
                for i in range(n):
                    s += K[i, j] * u[i]
                if s < floor:
                    return u, v, done, SINKHORN_UNDERFLOW
                v[j] = c[j] / s
            viol = 0.0
            for i in range(n):
                s = 0.0
                for j in range(m):
                    s += K[i, j] * v[j]
                if s < floor:
                    return u, v, done, SINKHORN_UNDERFLOW
                err = abs(u[i] * s - r[i])
                if err > viol:
                    viol = err
                u[i] = r[i] / s
            done = it + 1
            if stop_tol > 0.0 and viol <= stop_tol:
                break
        for j in range(m):
            s = 0.0
            for i in range(n):
                s += K[i, j] * u[i]
            if s < floor:
                return u, v, done, SINKHORN_UNDERFLOW
            v[j] = c[j] / s
        return u, v, done, SINKHORN_OK


if USE_NUMBA:
    pairwise_sqdist = pairwise_sqdist_numba
    min_sqdist = min_sqdist_numba
    sinkhorn_scalings = sinkhorn_scalings_numba
else:
    pairwise_sqdist = pairwise_sqdist_numpy
    min_sqdist = min_sqdist_numpy
    sinkhorn_scalings = sinkhorn_scalings_numpy


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
