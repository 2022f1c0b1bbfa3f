# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels. Signatures mirror ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt
from libc.float cimport DBL_MAX

cnp.import_array()


def masked_softmax_fwd(const double[:, ::1] x, const unsigned char[:, ::1] mask):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1], Rm = mask.shape[0]
    cdef Py_ssize_t r, j, mr
    cdef double mx, s, v
    cdef int any_vis
    out = np.empty((R, C), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef Py_ssize_t bad = -1
    with nogil:
        for r in range(R):
            mr = r % Rm
            mx = -DBL_MAX
            any_vis = 0
            for j in range(C):
                if mask[mr, j]:
                    any_vis = 1
                    if x[r, j] > mx:
                        mx = x[r, j]
            if not any_vis:
                bad = r
                break
            s = 0.0
            for j in range(C):
                if mask[mr, j]:
                    v = exp(x[r, j] - mx)
                    y[r, j] = v
                    s += v
                else:
                    y[r, j] = 0.0
            for j in range(C):
                y[r, j] = y[r, j] / s
    return out, bad


def softmax_bwd(const double[:, ::1] y, const double[:, ::1] g):
    cdef Py_ssize_t R = y.shape[0], C = y.shape[1], r, j
    cdef double dot
    out = np.empty((R, C), dtype=np.float64)
    cdef double[:, ::1] gx = out
    with nogil:
        for r in range(R):
            dot = 0.0
            for j in range(C):
                dot += g[r, j] * y[r, j]
            for j in range(C):
                gx[r, j] = y[r, j] * (g[r, j] - dot)
    return out


def layer_norm_fwd(const double[:, ::1] x, const double[::1] gamma, const double[::1] beta, double eps):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1], r, j
    cdef double mu, var, d, rs
    y_arr = np.empty((R, C), dtype=np.float64)
    xh_arr = np.empty((R, C), dtype=np.float64)
    rs_arr = np.empty(R, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xh = xh_arr
    cdef double[::1] rstd = rs_arr
    with nogil:
        for r in range(R):
            mu = 0.0
            for j in range(C):
                mu += x[r, j]
            mu = mu / C
            var = 0.0
            for j in range(C):
                d = x[r, j] - mu
                var += d * d
            var = var / C
            rs = 1.0 / sqrt(var + eps)
            rstd[r] = rs
            for j in range(C):
                d = (x[r, j] - mu) * rs
                xh[r, j] = d
                y[r, j] = d * gamma[j] + beta[j]
    return y_arr, xh_arr, rs_arr


def layer_norm_bwd(const double[:, ::1] g, const double[:, ::1] xhat, const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t R = g.shape[0], C = g.shape[1], r, j
    cdef double s1, s2, gh
    gx_arr = np.empty((R, C), dtype=np.float64)
    gg_arr = np.zeros(C, dtype=np.float64)
    gb_arr = np.zeros(C, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] ggam = gg_arr
    cdef double[::1] gbet = gb_arr
    with nogil:
        for r in range(R):
            s1 = 0.0
            s2 = 0.0
            for j in range(C):
                gh = g[r, j] * gamma[j]
                s1 += gh
                s2 += gh * xhat[r, j]
                ggam[j] += g[r, j] * xhat[r, j]
                gbet[j] += g[r, j]
            for j in range(C):
                gh = g[r, j] * gamma[j]
                gx[r, j] = rstd[r] / C * (C * gh - s1 - xhat[r, j] * s2)
    return gx_arr, gg_arr, gb_arr


def inject_fwd(const double[:, :, ::1] P, const double[:, ::1] bias, double alpha, const unsigned char[:, ::1] vis):
    cdef Py_ssize_t B = P.shape[0], R = P.shape[1], T = P.shape[2], Tq = vis.shape[0]
    cdef Py_ssize_t b, r, j, vr
    cdef double s, v
    cdef Py_ssize_t bad = -1
    out_arr = np.empty((B, R, T), dtype=np.float64)
    s_arr = np.empty((B, R), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] rowsum = s_arr
    with nogil:
        for b in range(B):
            for r in range(R):
                vr = r % Tq
                s = 0.0
                for j in range(T):
                    if vis[vr, j]:
                        v = P[b, r, j] + alpha * bias[b, j]
                        out[b, r, j] = v
                        s += v
                    else:
                        out[b, r, j] = 0.0
                rowsum[b, r] = s
                if not (s > 0.0):
                    bad = b * R + r
                    break
                for j in range(T):
                    out[b, r, j] = out[b, r, j] / s
            if bad >= 0:
                break
    return out_arr, s_arr, bad


def inject_bwd(const double[:, :, ::1] g, const double[:, :, ::1] out, const double[:, ::1] rowsum,
               const double[:, ::1] bias, const unsigned char[:, ::1] vis):
    cdef Py_ssize_t B = g.shape[0], R = g.shape[1], T = g.shape[2], Tq = vis.shape[0]
    cdef Py_ssize_t b, r, j, vr
    cdef double dot, v, galpha = 0.0
    gp_arr = np.empty((B, R, T), dtype=np.float64)
    gb_arr = np.zeros((B, T), dtype=np.float64)
    cdef double[:, :, ::1] gp = gp_arr
    cdef double[:, ::1] gb = gb_arr
    with nogil:
        for b in range(B):
            for r in range(R):
                vr = r % Tq
                dot = 0.0
                for j in range(T):
                    dot += g[b, r, j] * out[b, r, j]
                for j in range(T):
                    if vis[vr, j]:
                        v = (g[b, r, j] - dot) / rowsum[b, r]
                        gp[b, r, j] = v
                        gb[b, j] += v
                    else:
                        gp[b, r, j] = 0.0
            for j in range(T):
                galpha += gb[b, j] * bias[b, j]
    return gp_arr, gb_arr, galpha


def gmm_render_fwd(const double[:, :, ::1] centers, const double[:, ::1] spreads, const double[:, ::1] grid):
    cdef Py_ssize_t B = centers.shape[0], K = centers.shape[1], N = grid.shape[0]
    cdef Py_ssize_t b, k, n
    cdef double cx, cy, inv, dx, dy
    g_arr = np.empty((B, K, N), dtype=np.float64)
    cdef double[:, :, ::1] g = g_arr
    with nogil:
        for b in range(B):
            for k in range(K):
                cx = centers[b, k, 0]
                cy = centers[b, k, 1]
                inv = 1.0 / (2.0 * spreads[b, k] * spreads[b, k])
                for n in range(N):
                    dx = grid[n, 0] - cx
                    dy = grid[n, 1] - cy
                    g[b, k, n] = exp(-(dx * dx + dy * dy) * inv)
    return g_arr


def gmm_render_bwd(const double[:, :, ::1] gg, const double[:, :, ::1] g, const double[:, :, ::1] centers,
                   const double[:, ::1] spreads, const double[:, ::1] grid):
    cdef Py_ssize_t B = centers.shape[0], K = centers.shape[1], N = grid.shape[0]
    cdef Py_ssize_t b, k, n
    cdef double cx, cy, s, s2, dx, dy, w, ax, ay, asg
    gc_arr = np.empty((B, K, 2), dtype=np.float64)
    gs_arr = np.empty((B, K), dtype=np.float64)
    cdef double[:, :, ::1] gc = gc_arr
    cdef double[:, ::1] gs = gs_arr
    with nogil:
        for b in range(B):
            for k in range(K):
                cx = centers[b, k, 0]
                cy = centers[b, k, 1]
                s = spreads[b, k]
                s2 = s * s
                ax = 0.0
                ay = 0.0
                asg = 0.0
                for n in range(N):
                    dx = grid[n, 0] - cx
                    dy = grid[n, 1] - cy
                    w = gg[b, k, n] * g[b, k, n]
                    ax += w * dx
                    ay += w * dy
                    asg += w * (dx * dx + dy * dy)
                gc[b, k, 0] = ax / s2
                gc[b, k, 1] = ay / s2
                gs[b, k] = asg / (s2 * s)
    return gc_arr, gs_arr


def gelu_fwd(const double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v, t
    cdef double c = 0.7978845608028654
    out_arr = np.empty(n, dtype=np.float64)
    t_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double[::1] th = t_arr
    with nogil:
        for i in range(n):
            v = x[i]
            t = 1.0 - 2.0 / (exp(2.0 * c * (v + 0.044715 * v * v * v)) + 1.0)
            th[i] = t
            out[i] = 0.5 * v * (1.0 + t)
    return out_arr, t_arr


def gelu_bwd(const double[::1] g, const double[::1] x, const double[::1] th):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v, t
    cdef double c = 0.7978845608028654
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            v = x[i]
            t = th[i]
            out[i] = g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 0.134145 * v * v))
    return out_arr
