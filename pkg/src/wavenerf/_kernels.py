"""Fused plane-sweep statistics kernels.

Each source sample is a 4-tap bilinear gather; ``idx``/``wts`` have shape
(S, cells, 4) with invalid samples carrying all-zero weights and a 0 in
``mask``.  Samples are interpolated as the first tap plus weighted tap
differences and the moments are accumulated relative to the reference
value, so views that agree give exactly zero variance.
"""
import numba
import numpy as np


@numba.njit(cache=True, fastmath=False)
def volume_stats_fwd(ref, src, idx, wts, mask, depth_count):
    hw, c = ref.shape
    n_src = src.shape[0]
    cells = depth_count * hw
    out = np.empty((cells, 2 * c))
    mean = np.empty((cells, c))
    inv_n = np.empty(cells)
    acc = np.empty(c)
    sq = np.empty(c)
    for cell in range(cells):
        p = cell % hw
        n = 1.0
        for k in range(c):
            acc[k] = 0.0
            sq[k] = 0.0
        for s in range(n_src):
            if mask[s, cell] == 0.0:
                continue
            n += 1.0
            for k in range(c):
                x0 = src[s, idx[s, cell, 0], k]
                v = x0
                for t in range(1, 4):
                    v += wts[s, cell, t] * (src[s, idx[s, cell, t], k] - x0)
                dv = v - ref[p, k]
                acc[k] += dv
                sq[k] += dv * dv
        inv = 1.0 / n
        inv_n[cell] = inv
        for k in range(c):
            dm = acc[k] * inv
            var = sq[k] * inv - dm * dm
            out[cell, k] = var if var > 0.0 else 0.0
            m = ref[p, k] + dm
            out[cell, c + k] = m
            mean[cell, k] = m
    return out, mean, inv_n


@numba.njit(cache=True, fastmath=False)
def volume_stats_bwd(g, ref, src, idx, wts, mask, mean, inv_n, depth_count):
    hw, c = ref.shape
    n_src = src.shape[0]
    cells = depth_count * hw
    g_ref = np.zeros_like(ref)
    g_src = np.zeros_like(src)
    for cell in range(cells):
        p = cell % hw
        inv = inv_n[cell]
        for k in range(c):
            g_ref[p, k] += inv * (g[cell, c + k] + 2.0 * g[cell, k] * (ref[p, k] - mean[cell, k]))
        for s in range(n_src):
            if mask[s, cell] == 0.0:
                continue
            for k in range(c):
                x0 = src[s, idx[s, cell, 0], k]
                v = x0
                for t in range(1, 4):
                    v += wts[s, cell, t] * (src[s, idx[s, cell, t], k] - x0)
                gv = inv * (g[cell, c + k] + 2.0 * g[cell, k] * (v - mean[cell, k]))
                for t in range(4):
                    g_src[s, idx[s, cell, t], k] += wts[s, cell, t] * gv
    return g_ref, g_src
