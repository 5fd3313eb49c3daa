# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_kernels_py``; same signatures."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

ctypedef fused real:
    float
    double


def _im2col(const real[:, :, :, ::1] xp, real[:, :, ::1] out,
            int kh, int kw, int stride):
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t Ho = (xp.shape[2] - kh) // stride + 1
    cdef Py_ssize_t Wo = (xp.shape[3] - kw) // stride + 1
    cdef Py_ssize_t b, c, i, j, oy, ox, row, col
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oy in range(Ho):
                            col = oy * Wo
                            for ox in range(Wo):
                                out[b, row, col + ox] = xp[b, c, oy * stride + i, ox * stride + j]


def im2col(xp, int kh, int kw, int stride):
    xp = np.ascontiguousarray(xp)
    B, C, Hp, Wp = xp.shape
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    out = np.empty((B, C * kh * kw, Ho * Wo), dtype=xp.dtype)
    _im2col(xp, out, kh, kw, stride)
    return out


def _col2im(const real[:, :, ::1] cols, real[:, :, :, ::1] out,
            int kh, int kw, int stride):
    cdef Py_ssize_t B = out.shape[0], C = out.shape[1]
    cdef Py_ssize_t Ho = (out.shape[2] - kh) // stride + 1
    cdef Py_ssize_t Wo = (out.shape[3] - kw) // stride + 1
    cdef Py_ssize_t b, c, i, j, oy, ox, row, col
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oy in range(Ho):
                            col = oy * Wo
                            for ox in range(Wo):
                                out[b, c, oy * stride + i, ox * stride + j] += cols[b, row, col + ox]


def col2im(cols, int C, int Hp, int Wp, int kh, int kw, int stride):
    cols = np.ascontiguousarray(cols)
    out = np.zeros((cols.shape[0], C, Hp, Wp), dtype=cols.dtype)
    _col2im(cols, out, kh, kw, stride)
    return out


def _splat_fwd(const real[:, :, ::1] ctx, const real[:, :, ::1] probs,
               const long long[:, ::1] cells, real[:, :, ::1] out):
    cdef Py_ssize_t B = ctx.shape[0], C = ctx.shape[1], P = ctx.shape[2]
    cdef Py_ssize_t D = probs.shape[1]
    cdef Py_ssize_t b, c, d, p
    cdef long long cell
    cdef real w
    with nogil:
        for b in range(B):
            for d in range(D):
                for p in range(P):
                    cell = cells[d, p]
                    if cell < 0:
                        continue
                    w = probs[b, d, p]
                    for c in range(C):
                        out[b, c, cell] += w * ctx[b, c, p]


def splat_forward(ctx, probs, cells, int n_cells):
    ctx = np.ascontiguousarray(ctx)
    probs = np.ascontiguousarray(probs, dtype=ctx.dtype)
    cells = np.ascontiguousarray(cells, dtype=np.int64)
    out = np.zeros((ctx.shape[0], ctx.shape[1], n_cells), dtype=ctx.dtype)
    _splat_fwd(ctx, probs, cells, out)
    return out


def _splat_bwd(const real[:, :, ::1] grad, const real[:, :, ::1] ctx,
               const real[:, :, ::1] probs, const long long[:, ::1] cells,
               real[:, :, ::1] dctx, real[:, :, ::1] dprobs):
    cdef Py_ssize_t B = ctx.shape[0], C = ctx.shape[1], P = ctx.shape[2]
    cdef Py_ssize_t D = probs.shape[1]
    cdef Py_ssize_t b, c, d, p
    cdef long long cell
    cdef real w, acc, g
    with nogil:
        for b in range(B):
            for d in range(D):
                for p in range(P):
                    cell = cells[d, p]
                    if cell < 0:
                        continue
                    w = probs[b, d, p]
                    acc = 0
                    for c in range(C):
                        g = grad[b, c, cell]
                        dctx[b, c, p] += w * g
                        acc = acc + g * ctx[b, c, p]
                    dprobs[b, d, p] = acc


def splat_backward(grad, ctx, probs, cells):
    grad = np.ascontiguousarray(grad)
    ctx = np.ascontiguousarray(ctx, dtype=grad.dtype)
    probs = np.ascontiguousarray(probs, dtype=grad.dtype)
    cells = np.ascontiguousarray(cells, dtype=np.int64)
    dctx = np.zeros_like(ctx)
    dprobs = np.zeros_like(probs)
    _splat_bwd(grad, ctx, probs, cells, dctx, dprobs)
    return dctx, dprobs


def solve_lap(cost):
    cdef double[:, ::1] a = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    if n > m:
        raise ValueError(f"more rows than columns ({n} > {m})")
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(m + 1)
    cdef double[::1] minv = np.empty(m + 1)
    cdef long long[::1] p = np.zeros(m + 1, dtype=np.int64)
    cdef long long[::1] way = np.zeros(m + 1, dtype=np.int64)
    cdef unsigned char[::1] used = np.zeros(m + 1, dtype=np.uint8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur
    out = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] res = out
    with nogil:
        for i in range(1, n + 1):
            p[0] = i
            j0 = 0
            for j in range(m + 1):
                minv[j] = INFINITY
                used[j] = 0
            while True:
                used[j0] = 1
                i0 = p[j0]
                delta = INFINITY
                j1 = 0
                for j in range(1, m + 1):
                    if not used[j]:
                        cur = a[i0 - 1, j - 1] - u[i0] - v[j]
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
        for j in range(1, m + 1):
            if p[j]:
                res[p[j] - 1] = j - 1
    return out
