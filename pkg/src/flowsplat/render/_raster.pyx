# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tile rasterizer: per-pixel front-to-back alpha compositing and its adjoint.

Tiles and pixels are visited serially in a fixed order, so gradient
accumulation is deterministic.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from libc.stdlib cimport free, malloc

cnp.import_array()


def rasterize_forward(const double[:, ::1] xy, const double[:, ::1] conic, const double[::1] opac,
                      const double[:, ::1] feats, const cnp.int64_t[::1] offsets,
                      const cnp.int32_t[::1] ids, int height, int width, int tile,
                      double extent2, double t_min):
    cdef Py_ssize_t C = feats.shape[1]
    out_arr = np.zeros((height, width, C))
    T_arr = np.ones((height, width))
    nc_arr = np.zeros((height, width), dtype=np.int32)
    nu_arr = np.zeros((height, width), dtype=np.int32)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] T_final = T_arr
    cdef cnp.int32_t[:, ::1] n_contrib = nc_arr
    cdef cnp.int32_t[:, ::1] n_used = nu_arr
    cdef int tiles_x = (width + tile - 1) // tile
    cdef int tiles_y = (height + tile - 1) // tile
    cdef int tx, ty, px, py, g, last, used, c
    cdef Py_ssize_t k, start, end
    cdef double T, dx, dy, power, alpha, test_T, w, cutoff = -0.5 * extent2
    with nogil:
        for ty in range(tiles_y):
            for tx in range(tiles_x):
                start = offsets[ty * tiles_x + tx]
                end = offsets[ty * tiles_x + tx + 1]
                if start == end:
                    continue
                for py in range(ty * tile, min((ty + 1) * tile, height)):
                    for px in range(tx * tile, min((tx + 1) * tile, width)):
                        T = 1.0
                        last = 0
                        used = 0
                        for k in range(start, end):
                            g = ids[k]
                            dx = px - xy[g, 0]
                            dy = py - xy[g, 1]
                            power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) \
                                - conic[g, 1] * dx * dy
                            if power < cutoff:
                                continue
                            alpha = opac[g] * exp(power)
                            test_T = T * (1.0 - alpha)
                            if test_T < t_min:
                                break
                            w = alpha * T
                            for c in range(C):
                                out[py, px, c] += feats[g, c] * w
                            T = test_T
                            last = <int>(k - start + 1)
                            used += 1
                        T_final[py, px] = T
                        n_contrib[py, px] = last
                        n_used[py, px] = used
    return out_arr, T_arr, nc_arr, nu_arr


def rasterize_backward(const double[:, ::1] xy, const double[:, ::1] conic, const double[::1] opac,
                       const double[:, ::1] feats, const cnp.int64_t[::1] offsets,
                       const cnp.int32_t[::1] ids, int height, int width, int tile,
                       double extent2, double t_min, const double[:, :, ::1] g_out):
    cdef Py_ssize_t N = feats.shape[0]
    cdef Py_ssize_t C = feats.shape[1]
    gxy_arr = np.zeros((N, 2))
    gcon_arr = np.zeros((N, 3))
    gop_arr = np.zeros(N)
    gf_arr = np.zeros((N, C))
    cdef double[:, ::1] g_xy = gxy_arr
    cdef double[:, ::1] g_conic = gcon_arr
    cdef double[::1] g_opac = gop_arr
    cdef double[:, ::1] g_feats = gf_arr
    cdef int tiles_x = (width + tile - 1) // tile
    cdef int tiles_y = (height + tile - 1) // tile
    cdef int tx, ty, px, py, g, c, m, j
    cdef Py_ssize_t k, start, end, longest = 0
    cdef double T, dx, dy, power, alpha, test_T, a, Ti, G, d_alpha, d_pow, go, cutoff = -0.5 * extent2
    cdef Py_ssize_t n_tiles = tiles_x * tiles_y
    for k in range(n_tiles):
        if offsets[k + 1] - offsets[k] > longest:
            longest = offsets[k + 1] - offsets[k]
    if longest == 0:
        return gxy_arr, gcon_arr, gop_arr, gf_arr
    cdef int *s_id = <int *> malloc(longest * sizeof(int))
    cdef double *s_alpha = <double *> malloc(longest * sizeof(double))
    cdef double *s_T = <double *> malloc(longest * sizeof(double))
    cdef double *s_G = <double *> malloc(longest * sizeof(double))
    cdef double *s_dx = <double *> malloc(longest * sizeof(double))
    cdef double *s_dy = <double *> malloc(longest * sizeof(double))
    cdef double *behind = <double *> malloc(C * sizeof(double))
    if (s_id == NULL or s_alpha == NULL or s_T == NULL or s_G == NULL or s_dx == NULL
            or s_dy == NULL or behind == NULL):
        free(s_id); free(s_alpha); free(s_T); free(s_G); free(s_dx); free(s_dy); free(behind)
        raise MemoryError()
    try:
        with nogil:
            for ty in range(tiles_y):
                for tx in range(tiles_x):
                    start = offsets[ty * tiles_x + tx]
                    end = offsets[ty * tiles_x + tx + 1]
                    if start == end:
                        continue
                    for py in range(ty * tile, min((ty + 1) * tile, height)):
                        for px in range(tx * tile, min((tx + 1) * tile, width)):
                            # replay the forward pass for this pixel
                            T = 1.0
                            m = 0
                            for k in range(start, end):
                                g = ids[k]
                                dx = px - xy[g, 0]
                                dy = py - xy[g, 1]
                                power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) \
                                    - conic[g, 1] * dx * dy
                                if power < cutoff:
                                    continue
                                G = exp(power)
                                alpha = opac[g] * G
                                test_T = T * (1.0 - alpha)
                                if test_T < t_min:
                                    break
                                s_id[m] = g
                                s_alpha[m] = alpha
                                s_T[m] = T
                                s_G[m] = G
                                s_dx[m] = dx
                                s_dy[m] = dy
                                m += 1
                                T = test_T
                            # back-to-front: behind[c] holds the composite of everything after j
                            for c in range(C):
                                behind[c] = 0.0
                            for j in range(m - 1, -1, -1):
                                g = s_id[j]
                                a = s_alpha[j]
                                Ti = s_T[j]
                                d_alpha = 0.0
                                for c in range(C):
                                    go = g_out[py, px, c]
                                    g_feats[g, c] += go * a * Ti
                                    d_alpha += go * (feats[g, c] - behind[c]) * Ti
                                    behind[c] = feats[g, c] * a + (1.0 - a) * behind[c]
                                g_opac[g] += d_alpha * s_G[j]
                                d_pow = d_alpha * a
                                dx = s_dx[j]
                                dy = s_dy[j]
                                g_xy[g, 0] += d_pow * (conic[g, 0] * dx + conic[g, 1] * dy)
                                g_xy[g, 1] += d_pow * (conic[g, 1] * dx + conic[g, 2] * dy)
                                g_conic[g, 0] += -0.5 * d_pow * dx * dx
                                g_conic[g, 1] += -d_pow * dx * dy
                                g_conic[g, 2] += -0.5 * d_pow * dy * dy
    finally:
        free(s_id); free(s_alpha); free(s_T); free(s_G); free(s_dx); free(s_dy); free(behind)
    return gxy_arr, gcon_arr, gop_arr, gf_arr
