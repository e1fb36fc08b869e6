"""Hot inner loops: SVDF time filtering and masked argmax.

Every kernel has a numba-compiled path and a pure-numpy path with identical
semantics. Set ``ADVKWS_DISABLE_NUMBA=1`` before import to force numpy.
"""

import os

import numpy as np

DISABLE_NUMBA = os.environ.get("ADVKWS_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not DISABLE_NUMBA


# -- numpy reference paths ---------------------------------------------------

def time_filter_np(s, b):
    """out[:, t, n] = sum_k b[n, k] * s[:, t - k, n] with zero history."""
    L = s.shape[1]
    out = np.zeros_like(s)
    for k in range(min(b.shape[1], L)):
        out[:, k:, :] += s[:, : L - k, :] * b[:, k]
    return out


def time_filter_grad_np(g, s, b):
    L = s.shape[1]
    ds = np.zeros_like(s)
    db = np.zeros_like(b)
    for k in range(min(b.shape[1], L)):
        ds[:, : L - k, :] += g[:, k:, :] * b[:, k]
        db[:, k] = np.einsum("bln,bln->n", g[:, k:, :], s[:, : L - k, :])
    return ds, db


def masked_argmax_np(x, start, stop):
    """Earliest argmax of x[i, start[i]:stop[i]] per row."""
    idx = np.empty(x.shape[0], dtype=np.int64)
    for i in range(x.shape[0]):
        idx[i] = start[i] + int(np.argmax(x[i, start[i]:stop[i]]))
    return idx


# -- numba paths ------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def time_filter_nb(s, b):
        B, L, N = s.shape
        T = b.shape[1]
        bt = np.ascontiguousarray(b.T)
        out = np.zeros_like(s)
        for i in range(B):
            for t in range(L):
                for k in range(min(T, t + 1)):
                    for n in range(N):
                        out[i, t, n] += s[i, t - k, n] * bt[k, n]
        return out

    @numba.njit(cache=True)
    def time_filter_grad_nb(g, s, b):
        B, L, N = s.shape
        T = b.shape[1]
        bt = np.ascontiguousarray(b.T)
        ds = np.zeros_like(s)
        dbt = np.zeros_like(bt)
        for i in range(B):
            for t in range(L):
                for k in range(min(T, t + 1)):
                    for n in range(N):
                        ds[i, t - k, n] += g[i, t, n] * bt[k, n]
                        dbt[k, n] += g[i, t, n] * s[i, t - k, n]
        return ds, np.ascontiguousarray(dbt.T)

    @numba.njit(cache=True)
    def masked_argmax_nb(x, start, stop):
        idx = np.empty(x.shape[0], dtype=np.int64)
        for i in range(x.shape[0]):
            best = start[i]
            for t in range(start[i] + 1, stop[i]):
                if x[i, t] > x[i, best]:
                    best = t
            idx[i] = best
        return idx

else:  # pragma: no cover
    time_filter_nb = time_filter_np
    time_filter_grad_nb = time_filter_grad_np
    masked_argmax_nb = masked_argmax_np


def time_filter(s, b):
    if USE_NUMBA:
        return time_filter_nb(np.ascontiguousarray(s), np.ascontiguousarray(b))
    return time_filter_np(s, b)


def time_filter_grad(g, s, b):
    if USE_NUMBA:
        return time_filter_grad_nb(
            np.ascontiguousarray(g), np.ascontiguousarray(s), np.ascontiguousarray(b)
        )
    return time_filter_grad_np(g, s, b)


def masked_argmax(x, start, stop):
    start = np.asarray(start, dtype=np.int64)
    stop = np.asarray(stop, dtype=np.int64)
    if np.any(stop <= start):
        raise ValueError("empty argmax window")
    if USE_NUMBA:
        return masked_argmax_nb(np.ascontiguousarray(x), start, stop)
    return masked_argmax_np(x, start, stop)
