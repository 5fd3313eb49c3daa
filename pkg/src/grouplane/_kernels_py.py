"""Pure numpy/Python implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors every function
here with the same signature and must produce identical results (up to
floating-point summation order for the reductions).
"""
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride):
    """Unfold a padded batch ``[B, C, Hp, Wp]`` into ``[B, C*kh*kw, Ho*Wo]``."""
    B, C, Hp, Wp = xp.shape
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # [B, C, Ho, Wo, kh, kw] -> [B, C, kh, kw, Ho, Wo]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(
        B, C * kh * kw, Ho * Wo
    )


def col2im(cols, C, Hp, Wp, kh, kw, stride):
    """Adjoint of :func:`im2col`: scatter-add columns back into ``[B, C, Hp, Wp]``."""
    B = cols.shape[0]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    cols = cols.reshape(B, C, kh, kw, Ho, Wo)
    out = np.zeros((B, C, Hp, Wp), dtype=cols.dtype)
    for i in range(kh):
        i_end = i + stride * Ho
        for j in range(kw):
            j_end = j + stride * Wo
            out[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j]
    return out


def _splat_operator(probs, cells, n_cells):
    """Dense per-batch splat matrix ``S[b, cell, pixel] = sum_d probs[b,d,pixel]``."""
    B, D, P = probs.shape
    d_idx, p_idx = np.nonzero(cells >= 0)
    cell_idx = cells[d_idx, p_idx]
    flat = cell_idx * P + p_idx
    offsets = (np.arange(B) * (n_cells * P))[:, None]
    weights = probs[:, d_idx, p_idx]
    S = np.bincount(
        (offsets + flat[None, :]).ravel(),
        weights=weights.ravel(),
        minlength=B * n_cells * P,
    )
    return S.reshape(B, n_cells, P).astype(probs.dtype, copy=False)


def splat_forward(ctx, probs, cells, n_cells):
    """Sum-pool ``probs[b,d,p] * ctx[b,:,p]`` into BEV cells ``cells[d,p]``.

    ctx is ``[B, C, P]``, probs ``[B, D, P]``, cells ``[D, P]`` with -1 marking
    dropped (pixel, bin) pairs. Returns ``[B, C, n_cells]``.
    """
    S = _splat_operator(probs, cells, n_cells)
    return np.matmul(ctx, S.transpose(0, 2, 1))


def splat_backward(grad, ctx, probs, cells):
    n_cells = grad.shape[2]
    S = _splat_operator(probs, cells, n_cells)
    dctx = np.matmul(grad, S)
    M = np.matmul(grad.transpose(0, 2, 1), ctx)  # [B, n_cells, P]
    d_idx, p_idx = np.nonzero(cells >= 0)
    dprobs = np.zeros_like(probs)
    dprobs[:, d_idx, p_idx] = M[:, cells[d_idx, p_idx], p_idx]
    return dctx, dprobs


def solve_lap(cost):
    """Minimum-cost assignment of every row of an ``n x m`` matrix (n <= m).

    Shortest augmenting paths with row/column potentials, O(n^2 m).
    Returns an int64 array mapping row -> column.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ValueError(f"more rows than columns ({n} > {m})")
    a = cost.tolist()
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = a[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    out = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            out[p[j] - 1] = j - 1
    return out
