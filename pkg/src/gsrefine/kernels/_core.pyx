# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled pair-accumulation kernels.

Same contract as numpy_backend: find_pairs enumerates (image Gaussian,
surface Gaussian) pairs surviving the distance cull, weights them by the
Wendland color falloff, and accumulates per-image-Gaussian overlap sums;
grad_scatter turns cached pairs into per-surface-Gaussian gradient
contributions. A uniform grid per sigma octave keeps the search local.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport ceil, exp, fabs, floor, log2, sqrt

cnp.import_array()

DEF TWO_PI = 6.283185307179586
DEF FOUR_PI = 12.566370614359172


cdef inline double _wendland(double d, double support) nogil:
    if d >= support:
        return 0.0
    cdef double x = 1.0 - d / support
    cdef double x2 = x * x
    return x2 * x2 * (4.0 * d / support + 1.0)


cdef inline double _color_delta(const double* a, const double* b, bint circular) nogil:
    cdef double dh = fabs(a[0] - b[0])
    if circular and 1.0 - dh < dh:
        dh = 1.0 - dh
    cdef double ds = a[1] - b[1]
    cdef double dv = a[2] - b[2]
    return sqrt(dh * dh + ds * ds + dv * dv)


cdef inline long _clamp(long v, long lo, long hi) nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


def find_pairs(double[:, ::1] mu_s, double[::1] sig_s, double[:, ::1] eta_s,
               double[:, ::1] mu_i, double[::1] sig_i, double[:, ::1] eta_i,
               double cull_factor, double delta_color, bint circular_hue):
    cdef Py_ssize_t ns = sig_s.shape[0]
    cdef Py_ssize_t m = sig_i.shape[0]
    sums_arr = np.zeros(m, dtype=np.float64)
    if ns == 0 or m == 0:
        return (np.empty(0, np.int64), np.empty(0, np.int64),
                np.empty(0, np.float64), np.empty(0, np.float64), sums_arr, 0)

    # Octave bucketing by image-Gaussian sigma, one uniform grid per bucket.
    keys_arr = np.ceil(np.log2(np.maximum(np.asarray(sig_i), 1e-300))).astype(np.int64)
    order_arr = np.argsort(keys_arr, kind="stable")
    cdef long[::1] order = order_arr
    cdef long[::1] keys = keys_arr
    bucket_starts = [0]
    cdef Py_ssize_t t
    for t in range(1, m):
        if keys[order[t]] != keys[order[t - 1]]:
            bucket_starts.append(t)
    bucket_starts.append(m)

    cdef long[::1] pair_i
    cdef long[::1] pair_s
    cdef double[::1] pair_T
    cdef double[::1] pair_E
    cdef double[::1] sums = sums_arr

    cdef Py_ssize_t total = 0
    cdef long n_candidates = 0
    cdef int mode
    cdef Py_ssize_t b, b0, b1, mb, j, s, gi, gx, gy, ix0, ix1, iy0, iy1, pos
    cdef double smax, cell, minx, miny, maxx, maxy, r, sx, sy, dx, dy, d2, S, svar, ivar, delta, T, E
    cdef long nx, ny, ncells
    cdef long[::1] member
    cdef long[::1] cellof
    cdef long[::1] cstart
    cdef long[::1] corder
    cdef long[::1] fill
    cdef double cull2 = cull_factor * cull_factor

    pair_i_arr = pair_s_arr = pair_T_arr = pair_E_arr = None

    for mode in range(2):  # pass 0 counts, pass 1 fills
        if mode == 1:
            pair_i_arr = np.empty(total, dtype=np.int64)
            pair_s_arr = np.empty(total, dtype=np.int64)
            pair_T_arr = np.empty(total, dtype=np.float64)
            pair_E_arr = np.empty(total, dtype=np.float64)
            pair_i = pair_i_arr
            pair_s = pair_s_arr
            pair_T = pair_T_arr
            pair_E = pair_E_arr
        pos = 0
        for b in range(len(bucket_starts) - 1):
            b0 = bucket_starts[b]
            b1 = bucket_starts[b + 1]
            mb = b1 - b0
            member = order[b0:b1]
            smax = 0.0
            minx = miny = 1e300
            maxx = maxy = -1e300
            for j in range(mb):
                gi = member[j]
                if sig_i[gi] > smax:
                    smax = sig_i[gi]
                if mu_i[gi, 0] < minx:
                    minx = mu_i[gi, 0]
                if mu_i[gi, 0] > maxx:
                    maxx = mu_i[gi, 0]
                if mu_i[gi, 1] < miny:
                    miny = mu_i[gi, 1]
                if mu_i[gi, 1] > maxy:
                    maxy = mu_i[gi, 1]
            cell = cull_factor * smax
            if cell <= 0.0:
                cell = 1.0
            nx = <long>((maxx - minx) / cell) + 1
            ny = <long>((maxy - miny) / cell) + 1
            # Bound the grid so sparse, spread-out buckets stay cheap.
            while nx * ny > 4 * mb + 64:
                cell *= 2.0
                nx = <long>((maxx - minx) / cell) + 1
                ny = <long>((maxy - miny) / cell) + 1
            ncells = nx * ny

            cellof_arr = np.empty(mb, dtype=np.int64)
            cellof = cellof_arr
            cstart_arr = np.zeros(ncells + 1, dtype=np.int64)
            cstart = cstart_arr
            for j in range(mb):
                gi = member[j]
                gx = _clamp(<long>((mu_i[gi, 0] - minx) / cell), 0, nx - 1)
                gy = _clamp(<long>((mu_i[gi, 1] - miny) / cell), 0, ny - 1)
                cellof[j] = gy * nx + gx
                cstart[cellof[j] + 1] += 1
            for j in range(ncells):
                cstart[j + 1] += cstart[j]
            corder_arr = np.empty(mb, dtype=np.int64)
            corder = corder_arr
            fill_arr = cstart_arr.copy()
            fill = fill_arr
            for j in range(mb):
                corder[fill[cellof[j]]] = member[j]
                fill[cellof[j]] += 1

            for s in range(ns):
                sx = mu_s[s, 0]
                sy = mu_s[s, 1]
                svar = sig_s[s] * sig_s[s]
                r = cull_factor * sqrt(svar + smax * smax)
                ix0 = <long>floor((sx - r - minx) / cell)
                ix1 = <long>floor((sx + r - minx) / cell)
                iy0 = <long>floor((sy - r - miny) / cell)
                iy1 = <long>floor((sy + r - miny) / cell)
                if ix1 < 0 or iy1 < 0 or ix0 >= nx or iy0 >= ny:
                    continue
                ix0 = _clamp(ix0, 0, nx - 1)
                ix1 = _clamp(ix1, 0, nx - 1)
                iy0 = _clamp(iy0, 0, ny - 1)
                iy1 = _clamp(iy1, 0, ny - 1)
                for gy in range(iy0, iy1 + 1):
                    for gx in range(ix0, ix1 + 1):
                        for j in range(cstart[gy * nx + gx], cstart[gy * nx + gx + 1]):
                            gi = corder[j]
                            dx = mu_i[gi, 0] - sx
                            dy = mu_i[gi, 1] - sy
                            d2 = dx * dx + dy * dy
                            ivar = sig_i[gi] * sig_i[gi]
                            S = svar + ivar
                            if d2 > cull2 * S:
                                continue
                            if mode == 0:
                                n_candidates += 1
                            delta = _color_delta(&eta_s[s, 0], &eta_i[gi, 0], circular_hue)
                            T = _wendland(delta, delta_color)
                            if T <= 0.0:
                                continue
                            if mode == 0:
                                pos += 1
                            else:
                                E = T * TWO_PI * (svar * ivar / S) * exp(-d2 / (2.0 * S))
                                pair_i[pos] = gi
                                pair_s[pos] = s
                                pair_T[pos] = T
                                pair_E[pos] = E
                                sums[gi] += E
                                pos += 1
        if mode == 0:
            total = pos

    return pair_i_arr, pair_s_arr, pair_T_arr, pair_E_arr, sums_arr, n_candidates


def grad_scatter(long[::1] pair_i, long[::1] pair_s, double[::1] pair_T,
                 cnp.uint8_t[::1] unsaturated,
                 double[:, ::1] mu_s, double[::1] sig_s, double[::1] depth_s,
                 double[::1] pnz_s, double[:, ::1] dmu_s,
                 double[:, ::1] mu_i, double[::1] sig_i, double[::1] eii):
    cdef Py_ssize_t ns = sig_s.shape[0]
    grad_arr = np.zeros(ns, dtype=np.float64)
    cdef double[::1] grad = grad_arr
    cdef Py_ssize_t p, i, s
    cdef double dx, dy, d2, svar, S, B, bracket, dE
    for p in range(pair_i.shape[0]):
        i = pair_i[p]
        if not unsaturated[i]:
            continue
        s = pair_s[p]
        dx = mu_i[i, 0] - mu_s[s, 0]
        dy = mu_i[i, 1] - mu_s[s, 1]
        d2 = dx * dx + dy * dy
        svar = sig_s[s] * sig_s[s]
        S = svar + sig_i[i] * sig_i[i]
        B = (svar * sig_i[i] * sig_i[i] / S) * exp(-d2 / (2.0 * S))
        bracket = (pnz_s[s] / depth_s[s]) * (-1.0 + svar / S - d2 * svar / (2.0 * S * S))
        bracket += (dx * dmu_s[s, 0] + dy * dmu_s[s, 1]) / (2.0 * S)
        dE = pair_T[p] * FOUR_PI * B * bracket
        grad[s] += dE / eii[i]
    return grad_arr
