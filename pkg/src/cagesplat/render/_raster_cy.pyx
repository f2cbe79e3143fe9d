# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rasterizer kernels: fused projection/culling, radix depth sort,
tile pair bucketing, and the front-to-back composite loop.

Math matches the pure-python path: contributions are truncated outside the
3-sigma Mahalanobis ellipse (q > 4.5) and accumulation runs in double
precision; the composite loop only narrows the scanned pixel ranges, the
per-pixel accept test is identical.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport floor as c_floor
from libc.math cimport round as c_round
from libc.math cimport sqrt as c_sqrt

cnp.import_array()

cdef extern from *:
    int __builtin_ctzll(unsigned long long) nogil

cdef union _bits:
    double d
    unsigned long long u


cdef inline double fast_exp(double x) nogil:
    """exp(x) for x in [-700, 0], ~1e-13 relative error (2^n * poly(r))."""
    cdef double nd = c_round(x * 1.4426950408889634)
    cdef double r = x - nd * 0.693147180559945286, p
    cdef _bits b
    p = 1.0 + r * (1.0 + r * (0.5 + r * (0.16666666666666666 + r * (
        0.041666666666666664 + r * (0.008333333333333333 + r * (
            0.001388888888888889 + r * (0.0001984126984126984 + r * (
                2.48015873015873e-05 + r * (2.7557319223985893e-06 +
                                            r * 2.755731922398589e-07)))))))))
    b.u = (<unsigned long long> (<long long> nd + 1023)) << 52
    return p * b.d


def project_cull(
    cnp.float64_t[:, ::1] centers,     # [N,3]
    cnp.float64_t[:, ::1] covs,        # [N,6] packed xx,xy,xz,yy,yz,zz
    cnp.float64_t[::1] opacity,
    cnp.float64_t[:, ::1] color,
    cnp.float64_t[:, ::1] R,           # [3,3] world->camera
    cnp.float64_t[::1] pos,
    double f, double cx, double cy,
    double width, double height,
    double near, double far,
    double cov_floor, double cutoff,
):
    """Fused transform + perspective covariance + frustum cull.

    Returns compacted fragment arrays in ascending Gaussian index order.
    """
    cdef Py_ssize_t n = centers.shape[0]
    idx_np = np.empty(n, dtype=np.int32)
    mean_np = np.empty((n, 2), dtype=np.float64)
    cov_np = np.empty((n, 3), dtype=np.float64)
    inv_np = np.empty((n, 3), dtype=np.float32)
    depth_np = np.empty(n, dtype=np.float64)
    op_np = np.empty(n, dtype=np.float64)
    col_np = np.empty((n, 3), dtype=np.float64)
    rx_np = np.empty(n, dtype=np.float64)
    ry_np = np.empty(n, dtype=np.float64)
    fdat_np = np.empty((n, 8), dtype=np.float32)
    cdef cnp.int32_t[::1] o_idx = idx_np
    cdef cnp.float64_t[:, ::1] o_mean = mean_np
    cdef cnp.float64_t[:, ::1] o_cov = cov_np
    cdef cnp.float32_t[:, ::1] o_inv = inv_np
    cdef cnp.float64_t[::1] o_depth = depth_np
    cdef cnp.float64_t[::1] o_op = op_np
    cdef cnp.float64_t[:, ::1] o_col = col_np
    cdef cnp.float64_t[::1] o_rx = rx_np
    cdef cnp.float64_t[::1] o_ry = ry_np
    cdef cnp.float32_t[:, ::1] o_fd = fdat_np
    cdef double r00 = R[0, 0], r01 = R[0, 1], r02 = R[0, 2]
    cdef double r10 = R[1, 0], r11 = R[1, 1], r12 = R[1, 2]
    cdef double r20 = R[2, 0], r21 = R[2, 1], r22 = R[2, 2]
    cdef double px = pos[0], py = pos[1], pz = pos[2]
    cdef Py_ssize_t i, m = 0
    cdef double wx, wy, wz, xc, yc, zc, inv_z, u, v
    cdef double j00, j02, j12
    cdef double s_xx, s_xy, s_xz, s_yy, s_yz, s_zz
    cdef double q00, q01, q02, q11, q12, q22
    cdef double t0, t1, t2
    cdef double a, b, c, det, rx, ry
    for i in range(n):
        wx = centers[i, 0] - px
        wy = centers[i, 1] - py
        wz = centers[i, 2] - pz
        zc = r20 * wx + r21 * wy + r22 * wz
        if zc <= near or zc >= far:
            continue
        xc = r00 * wx + r01 * wy + r02 * wz
        yc = r10 * wx + r11 * wy + r12 * wz
        inv_z = 1.0 / zc
        u = cx + f * xc * inv_z
        v = cy + f * yc * inv_z
        s_xx = covs[i, 0]; s_xy = covs[i, 1]; s_xz = covs[i, 2]
        s_yy = covs[i, 3]; s_yz = covs[i, 4]; s_zz = covs[i, 5]
        # rows of R applied to Sigma: t = Sigma R_k^T, then quadratic forms
        t0 = s_xx * r00 + s_xy * r01 + s_xz * r02
        t1 = s_xy * r00 + s_yy * r01 + s_yz * r02
        t2 = s_xz * r00 + s_yz * r01 + s_zz * r02
        q00 = r00 * t0 + r01 * t1 + r02 * t2
        q01 = r10 * t0 + r11 * t1 + r12 * t2
        q02 = r20 * t0 + r21 * t1 + r22 * t2
        t0 = s_xx * r10 + s_xy * r11 + s_xz * r12
        t1 = s_xy * r10 + s_yy * r11 + s_yz * r12
        t2 = s_xz * r10 + s_yz * r11 + s_zz * r12
        q11 = r10 * t0 + r11 * t1 + r12 * t2
        q12 = r20 * t0 + r21 * t1 + r22 * t2
        t0 = s_xx * r20 + s_xy * r21 + s_xz * r22
        t1 = s_xy * r20 + s_yy * r21 + s_yz * r22
        t2 = s_xz * r20 + s_yz * r21 + s_zz * r22
        q22 = r20 * t0 + r21 * t1 + r22 * t2
        j00 = f * inv_z
        j02 = -f * xc * inv_z * inv_z
        j12 = -f * yc * inv_z * inv_z
        a = j00 * j00 * q00 + 2.0 * j00 * j02 * q02 + j02 * j02 * q22 + cov_floor
        b = j00 * j00 * q01 + j00 * j12 * q02 + j02 * j00 * q12 + j02 * j12 * q22
        c = j00 * j00 * q11 + 2.0 * j00 * j12 * q12 + j12 * j12 * q22 + cov_floor
        rx = cutoff * c_sqrt(a)
        ry = cutoff * c_sqrt(c)
        if u + rx < 0 or u - rx > width or v + ry < 0 or v - ry > height:
            continue
        o_idx[m] = <cnp.int32_t> i
        o_mean[m, 0] = u
        o_mean[m, 1] = v
        o_cov[m, 0] = a
        o_cov[m, 1] = b
        o_cov[m, 2] = c
        det = a * c - b * b
        o_inv[m, 0] = <cnp.float32_t> (c / det)
        o_inv[m, 1] = <cnp.float32_t> (-b / det)
        o_inv[m, 2] = <cnp.float32_t> (a / det)
        o_fd[m, 0] = o_inv[m, 0]
        o_fd[m, 1] = o_inv[m, 1]
        o_fd[m, 2] = o_inv[m, 2]
        o_fd[m, 3] = <cnp.float32_t> ry
        o_fd[m, 4] = <cnp.float32_t> opacity[i]
        o_fd[m, 5] = <cnp.float32_t> color[i, 0]
        o_fd[m, 6] = <cnp.float32_t> color[i, 1]
        o_fd[m, 7] = <cnp.float32_t> color[i, 2]
        o_depth[m] = zc
        o_op[m] = opacity[i]
        o_col[m, 0] = color[i, 0]
        o_col[m, 1] = color[i, 1]
        o_col[m, 2] = color[i, 2]
        o_rx[m] = rx
        o_ry[m] = ry
        m += 1
    sl = slice(0, m)
    return (idx_np[sl], mean_np[sl], cov_np[sl], inv_np[sl], depth_np[sl],
            op_np[sl], col_np[sl], rx_np[sl], ry_np[sl], fdat_np[sl])


def radix_order(cnp.uint64_t[::1] keys):
    """Indices sorting positive-double bit patterns ascending; stable, so
    equal keys keep their (ascending index) order."""
    cdef Py_ssize_t n = keys.shape[0]
    order_np = np.arange(n, dtype=np.int32)
    tmp_np = np.empty(n, dtype=np.int32)
    kbuf_np = np.empty(n, dtype=np.uint64)
    ktmp_np = np.empty(n, dtype=np.uint64)
    hist_np = np.zeros(65536, dtype=np.int64)
    cdef cnp.int32_t[::1] order = order_np
    cdef cnp.int32_t[::1] tmp = tmp_np
    cdef cnp.uint64_t[::1] kcur = kbuf_np
    cdef cnp.uint64_t[::1] ktmp = ktmp_np
    cdef cnp.int64_t[::1] hist = hist_np
    cdef Py_ssize_t i
    cdef int shift, d
    cdef cnp.int64_t acc, cnt
    for i in range(n):
        kcur[i] = keys[i]
    for shift in (0, 16, 32, 48):
        for i in range(65536):
            hist[i] = 0
        for i in range(n):
            hist[(kcur[i] >> shift) & 0xFFFF] += 1
        acc = 0
        for i in range(65536):
            cnt = hist[i]
            hist[i] = acc
            acc += cnt
        for i in range(n):
            d = <int> ((kcur[i] >> shift) & 0xFFFF)
            tmp[hist[d]] = order[i]
            ktmp[hist[d]] = kcur[i]
            hist[d] += 1
        order, tmp = tmp, order
        kcur, ktmp = ktmp, kcur
    # four passes: result landed back in the original buffers
    return order_np


def composite_tiles(
    cnp.int32_t[::1] pair_frag,      # fragment id per (tile, frag) pair, tile-grouped
    cnp.int64_t[::1] tile_start,     # CSR offsets into pair_frag, len = n_tiles + 1
    cnp.float64_t[:, ::1] mean,      # [F,2] pixel coordinates
    cnp.float32_t[:, ::1] fdat,     # [F,8] ia,ib,ic,ry,opacity,r,g,b
    int width,
    int height,
    int tile_px,                     # <= 64 (live-pixel masks are one u64 per row)
    int tiles_x,
    double stop_t,                   # early-exit transmittance threshold
    int n_threads,
):
    out = np.zeros((height, width, 3), dtype=np.float32)
    trans = np.ones((height, width), dtype=np.float64)
    cdef cnp.float32_t[:, :, ::1] img = out
    cdef cnp.float64_t[:, ::1] T = trans
    cdef Py_ssize_t n_tiles = tile_start.shape[0] - 1
    cdef Py_ssize_t t, pi
    cdef int x0t, y0t, x1t, y1t, x0, x1, y0, y1, x, y, f, alive, row, nrows, xoff
    cdef double mx, my, ry, ia, ib, ic, inv_ia, op, c0, c1, c2
    cdef double dx, dy, q, alpha, tv
    cdef double bq, cq, disc, sq
    cdef unsigned long long live[64]
    cdef unsigned long long m

    for t in prange(n_tiles, nogil=True, schedule="dynamic", num_threads=n_threads):
        x0t = (<int> (t % tiles_x)) * tile_px
        y0t = (<int> (t // tiles_x)) * tile_px
        x1t = x0t + tile_px
        y1t = y0t + tile_px
        if x1t > width:
            x1t = width
        if y1t > height:
            y1t = height
        nrows = y1t - y0t
        if nrows <= 0 or x1t <= x0t:
            continue
        alive = (x1t - x0t) * nrows
        for row in range(nrows):
            live[row] = ((<unsigned long long> 1 << (x1t - x0t)) - 1) \
                if x1t - x0t < 64 else <unsigned long long> 0xFFFFFFFFFFFFFFFF
        for pi in range(tile_start[t], tile_start[t + 1]):
            if alive <= 0:
                break
            f = pair_frag[pi]
            my = mean[f, 1]
            ry = <double> fdat[f, 3]
            y0 = <int> c_floor(my - ry - 0.5)
            if y0 < y0t:
                y0 = y0t
            y1 = <int> c_floor(my + ry - 0.5) + 2
            if y1 > y1t:
                y1 = y1t
            if y0 >= y1:
                continue
            mx = mean[f, 0]
            ia = <double> fdat[f, 0]
            ib = <double> fdat[f, 1]
            ic = <double> fdat[f, 2]
            inv_ia = 1.0 / ia
            op = <double> fdat[f, 4]
            c0 = <double> fdat[f, 5]
            c1 = <double> fdat[f, 6]
            c2 = <double> fdat[f, 7]
            for y in range(y0, y1):
                m = live[y - y0t]
                if m == 0:
                    continue
                dy = (y + 0.5) - my
                # x-range of the q <= 4.5 ellipse on this row (slack covers
                # root rounding; the per-pixel test keeps the accept set exact)
                bq = ib * dy
                cq = ic * dy * dy - 9.0
                disc = bq * bq - ia * cq
                if disc <= 0:
                    continue
                sq = c_sqrt(disc)
                x0 = <int> c_floor(mx + (-bq - sq) * inv_ia - 0.5 - 1e-9) + 1
                if x0 < x0t:
                    x0 = x0t
                x1 = <int> c_floor(mx + (-bq + sq) * inv_ia - 0.5 + 1e-9) + 1
                if x1 > x1t:
                    x1 = x1t
                if x0 >= x1:
                    continue
                m = m >> (x0 - x0t)
                m = m << (x0 - x0t)
                if x1 - x0t < 64:
                    m = m & (((<unsigned long long> 1) << (x1 - x0t)) - 1)
                while m != 0:
                    xoff = __builtin_ctzll(m)
                    m = m & (m - 1)
                    x = x0t + xoff
                    dx = (x + 0.5) - mx
                    q = 0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy)
                    if q > 4.5:
                        continue
                    tv = T[y, x]
                    alpha = op * fast_exp(-q)
                    img[y, x, 0] += <cnp.float32_t> (tv * alpha * c0)
                    img[y, x, 1] += <cnp.float32_t> (tv * alpha * c1)
                    img[y, x, 2] += <cnp.float32_t> (tv * alpha * c2)
                    tv = tv * (1.0 - alpha)
                    T[y, x] = tv
                    if tv < stop_t:
                        live[y - y0t] = live[y - y0t] & ~(
                            (<unsigned long long> 1) << xoff)
                        alive = alive - 1
    return out, trans


def bucket_pairs(
    cnp.int32_t[::1] frag_order,     # fragment ids in depth order
    cnp.int32_t[::1] tx0,            # inclusive tile ranges per fragment
    cnp.int32_t[::1] tx1,
    cnp.int32_t[::1] ty0,
    cnp.int32_t[::1] ty1,
    int tiles_x,
    int tiles_y,
):
    """Counting sort of (fragment, tile) pairs by tile, preserving depth order."""
    cdef Py_ssize_t n = frag_order.shape[0]
    cdef Py_ssize_t n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] cnt = counts
    cdef Py_ssize_t i
    cdef int f, ax, ay
    for i in range(n):
        f = frag_order[i]
        for ay in range(ty0[f], ty1[f] + 1):
            for ax in range(tx0[f], tx1[f] + 1):
                cnt[ay * tiles_x + ax + 1] += 1
    starts = np.cumsum(counts).astype(np.int64)
    out = np.empty(starts[n_tiles], dtype=np.int32)
    cdef cnp.int64_t[::1] cursor = starts.copy()
    cdef cnp.int32_t[::1] pairs = out
    cdef Py_ssize_t tid
    for i in range(n):
        f = frag_order[i]
        for ay in range(ty0[f], ty1[f] + 1):
            for ax in range(tx0[f], tx1[f] + 1):
                tid = ay * tiles_x + ax
                pairs[cursor[tid]] = f
                cursor[tid] += 1
    return out, starts
