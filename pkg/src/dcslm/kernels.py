"""Hot numeric kernels: nearest-centroid search and GRU time scans.

Two interchangeable backends are provided. The numba backend compiles the
scalar loops with ``@njit(cache=True)``; the numpy backend is pure vectorized
numpy and serves as the reference/fallback path. Selection happens once at
import time:

* ``DCSLM_NUMBA=0`` in the environment forces the numpy backend,
* otherwise numba is used when it is importable.

Both backends are deterministic run-to-run. ``benchmarks/bench_kernels.py``
compares their throughput.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_FLAG = "DCSLM_NUMBA"
_want_numba = os.environ.get(_ENV_FLAG, "1") != "0"

try:
    from numba import njit

    _have_numba = True
except ImportError:  # pragma: no cover - environment without numba
    _have_numba = False

_use_numba = _want_numba and _have_numba


def numba_enabled() -> bool:
    """True when the compiled backend is active."""
    return _use_numba


# ---------------------------------------------------------------------------
# nearest centroid
# ---------------------------------------------------------------------------

def nearest_centroid_numpy(frames: np.ndarray, centroids: np.ndarray):
    """Assign each frame to its closest centroid (squared Euclidean).

    Ties break toward the lowest centroid index. Returns ``(ids, sqdist)``.
    """
    n = frames.shape[0]
    ids = np.empty(n, dtype=np.int64)
    sq = np.empty(n, dtype=np.float64)
    # chunked so the (chunk, K, dim) temporary stays small
    chunk = max(1, int(4_000_000 // max(1, centroids.size)))
    for s in range(0, n, chunk):
        diff = frames[s:s + chunk, None, :] - centroids[None, :, :]
        dist = np.einsum("nkd,nkd->nk", diff, diff)
        best = np.argmin(dist, axis=1)
        ids[s:s + chunk] = best
        sq[s:s + chunk] = dist[np.arange(dist.shape[0]), best]
    return ids, sq


if _have_numba:

    @njit(cache=True)
    def _nearest_centroid_jit(frames, centroids):
        n, dim = frames.shape
        k = centroids.shape[0]
        ids = np.empty(n, dtype=np.int64)
        sq = np.empty(n, dtype=np.float64)
        for i in range(n):
            best = 0
            best_d = np.inf
            for c in range(k):
                d = 0.0
                for j in range(dim):
                    t = frames[i, j] - centroids[c, j]
                    d += t * t
                if d < best_d:
                    best_d = d
                    best = c
            ids[i] = best
            sq[i] = best_d
        return ids, sq

    def nearest_centroid_numba(frames: np.ndarray, centroids: np.ndarray):
        return _nearest_centroid_jit(
            np.ascontiguousarray(frames), np.ascontiguousarray(centroids)
        )


# ---------------------------------------------------------------------------
# GRU scans
# ---------------------------------------------------------------------------
#
# Single direction, single sequence. Gate layout along the 3H axis is
# [reset | update | candidate]; the input projection xw = x @ W + b is
# precomputed by the caller (one BLAS call per sequence). The recurrence is
#
#   r_t = sigmoid(xw_r[t] + h_{t-1} @ Ur)
#   z_t = sigmoid(xw_z[t] + h_{t-1} @ Uz)
#   n_t = tanh(xw_n[t] + r_t * (h_{t-1} @ Un))
#   h_t = (1 - z_t) * n_t + z_t * h_{t-1}
#
# with h_{-1} = 0. Forward returns the per-step activations needed by the
# backward scan; ``uh`` caches h_{t-1} @ Un.


def gru_forward_numpy(xw, ur, uz, un):
    L = xw.shape[0]
    H = ur.shape[0]
    h = np.zeros((L, H))
    r = np.empty((L, H))
    z = np.empty((L, H))
    n = np.empty((L, H))
    uh = np.empty((L, H))
    hprev = np.zeros(H)
    for t in range(L):
        pr = hprev @ ur
        pz = hprev @ uz
        pn = hprev @ un
        rt = 1.0 / (1.0 + np.exp(-(xw[t, :H] + pr)))
        zt = 1.0 / (1.0 + np.exp(-(xw[t, H:2 * H] + pz)))
        nt = np.tanh(xw[t, 2 * H:] + rt * pn)
        r[t] = rt
        z[t] = zt
        n[t] = nt
        uh[t] = pn
        h[t] = (1.0 - zt) * nt + zt * hprev
        hprev = h[t]
    return h, r, z, n, uh


def gru_backward_numpy(dh, h, r, z, n, uh, ur, uz, un):
    L, H = dh.shape
    dxw = np.zeros((L, 3 * H))
    dur = np.zeros((H, H))
    duz = np.zeros((H, H))
    dun = np.zeros((H, H))
    carry = np.zeros(H)
    for t in range(L - 1, -1, -1):
        hprev = h[t - 1] if t > 0 else np.zeros(H)
        g = dh[t] + carry
        dz = g * (hprev - n[t]) * z[t] * (1.0 - z[t])
        dn = g * (1.0 - z[t]) * (1.0 - n[t] * n[t])
        dr = dn * uh[t] * r[t] * (1.0 - r[t])
        duh = dn * r[t]
        dxw[t, :H] = dr
        dxw[t, H:2 * H] = dz
        dxw[t, 2 * H:] = dn
        carry = g * z[t] + dr @ ur.T + dz @ uz.T + duh @ un.T
        dur += np.outer(hprev, dr)
        duz += np.outer(hprev, dz)
        dun += np.outer(hprev, duh)
    return dxw, dur, duz, dun


if _have_numba:

    @njit(cache=True)
    def _gru_forward_jit(xw, ur, uz, un):
        L = xw.shape[0]
        H = ur.shape[0]
        h = np.zeros((L, H))
        r = np.empty((L, H))
        z = np.empty((L, H))
        n = np.empty((L, H))
        uh = np.empty((L, H))
        hprev = np.zeros(H)
        for t in range(L):
            pr = np.dot(hprev, ur)
            pz = np.dot(hprev, uz)
            pn = np.dot(hprev, un)
            for j in range(H):
                rj = 1.0 / (1.0 + np.exp(-(xw[t, j] + pr[j])))
                zj = 1.0 / (1.0 + np.exp(-(xw[t, H + j] + pz[j])))
                nj = np.tanh(xw[t, 2 * H + j] + rj * pn[j])
                r[t, j] = rj
                z[t, j] = zj
                n[t, j] = nj
                uh[t, j] = pn[j]
                h[t, j] = (1.0 - zj) * nj + zj * hprev[j]
            hprev = h[t]
        return h, r, z, n, uh

    @njit(cache=True)
    def _gru_backward_jit(dh, h, r, z, n, uh, urT, uzT, unT):
        L, H = dh.shape
        dxw = np.zeros((L, 3 * H))
        dur = np.zeros((H, H))
        duz = np.zeros((H, H))
        dun = np.zeros((H, H))
        carry = np.zeros(H)
        zero = np.zeros(H)
        dr = np.empty(H)
        dz = np.empty(H)
        duh = np.empty(H)
        for t in range(L - 1, -1, -1):
            hprev = h[t - 1] if t > 0 else zero
            for j in range(H):
                g = dh[t, j] + carry[j]
                dzj = g * (hprev[j] - n[t, j]) * z[t, j] * (1.0 - z[t, j])
                dnj = g * (1.0 - z[t, j]) * (1.0 - n[t, j] * n[t, j])
                drj = dnj * uh[t, j] * r[t, j] * (1.0 - r[t, j])
                dr[j] = drj
                dz[j] = dzj
                duh[j] = dnj * r[t, j]
                dxw[t, j] = drj
                dxw[t, H + j] = dzj
                dxw[t, 2 * H + j] = dnj
                carry[j] = g * z[t, j]
            carry = carry + np.dot(dr, urT) + np.dot(dz, uzT) + np.dot(duh, unT)
            for i in range(H):
                hp = hprev[i]
                if hp != 0.0:
                    for j in range(H):
                        dur[i, j] += hp * dr[j]
                        duz[i, j] += hp * dz[j]
                        dun[i, j] += hp * duh[j]
        return dxw, dur, duz, dun

    def gru_forward_numba(xw, ur, uz, un):
        return _gru_forward_jit(np.ascontiguousarray(xw), ur, uz, un)

    def gru_backward_numba(dh, h, r, z, n, uh, ur, uz, un):
        return _gru_backward_jit(
            np.ascontiguousarray(dh), h, r, z, n, uh,
            np.ascontiguousarray(ur.T),
            np.ascontiguousarray(uz.T),
            np.ascontiguousarray(un.T),
        )


if _use_numba:
    nearest_centroid = nearest_centroid_numba
    gru_forward = gru_forward_numba
    gru_backward = gru_backward_numba
else:
    nearest_centroid = nearest_centroid_numpy
    gru_forward = gru_forward_numpy
    gru_backward = gru_backward_numpy
