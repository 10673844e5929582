# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: bilinear gather/scatter and rotated-box overlap."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, cos, sin, fabs, sqrt

cnp.import_array()

ctypedef fused real:
    float
    double


def bilinear_forward(real[:, :, ::1] src, real[:, ::1] px, real[:, ::1] py):
    cdef Py_ssize_t C = src.shape[0], H = src.shape[1], W = src.shape[2]
    cdef Py_ssize_t Ho = px.shape[0], Wo = px.shape[1]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((C, Ho, Wo), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t c, i, j, x0, y0, x1, y1
    cdef double fx, fy, wx1, wy1, wx0, wy0, w00, w01, w10, w11, acc
    cdef bint vx0, vx1, vy0, vy1
    for i in range(Ho):
        for j in range(Wo):
            fx = px[i, j]
            fy = py[i, j]
            x0 = <Py_ssize_t>floor(fx)
            y0 = <Py_ssize_t>floor(fy)
            x1 = x0 + 1
            y1 = y0 + 1
            wx1 = fx - x0
            wy1 = fy - y0
            wx0 = 1.0 - wx1
            wy0 = 1.0 - wy1
            vx0 = 0 <= x0 < W
            vx1 = 0 <= x1 < W
            vy0 = 0 <= y0 < H
            vy1 = 0 <= y1 < H
            w00 = wy0 * wx0
            w01 = wy0 * wx1
            w10 = wy1 * wx0
            w11 = wy1 * wx1
            for c in range(C):
                acc = 0.0
                if vy0 and vx0:
                    acc = acc + w00 * src[c, y0, x0]
                if vy0 and vx1:
                    acc = acc + w01 * src[c, y0, x1]
                if vy1 and vx0:
                    acc = acc + w10 * src[c, y1, x0]
                if vy1 and vx1:
                    acc = acc + w11 * src[c, y1, x1]
                out[c, i, j] = acc
    return out_arr


def bilinear_backward(real[:, :, ::1] src, real[:, ::1] px, real[:, ::1] py,
                      real[:, :, ::1] gout):
    cdef Py_ssize_t C = src.shape[0], H = src.shape[1], W = src.shape[2]
    cdef Py_ssize_t Ho = px.shape[0], Wo = px.shape[1]
    dtype = np.float32 if real is float else np.float64
    gsrc_arr = np.zeros((C, H, W), dtype=dtype)
    gx_arr = np.zeros((Ho, Wo), dtype=dtype)
    gy_arr = np.zeros((Ho, Wo), dtype=dtype)
    cdef real[:, :, ::1] gsrc = gsrc_arr
    cdef real[:, ::1] gx = gx_arr
    cdef real[:, ::1] gy = gy_arr
    cdef Py_ssize_t c, i, j, x0, y0, x1, y1
    cdef double fx, fy, wx1, wy1, wx0, wy0, g, v00, v01, v10, v11, sx, sy
    cdef bint vx0, vx1, vy0, vy1
    for i in range(Ho):
        for j in range(Wo):
            fx = px[i, j]
            fy = py[i, j]
            x0 = <Py_ssize_t>floor(fx)
            y0 = <Py_ssize_t>floor(fy)
            x1 = x0 + 1
            y1 = y0 + 1
            wx1 = fx - x0
            wy1 = fy - y0
            wx0 = 1.0 - wx1
            wy0 = 1.0 - wy1
            vx0 = 0 <= x0 < W
            vx1 = 0 <= x1 < W
            vy0 = 0 <= y0 < H
            vy1 = 0 <= y1 < H
            sx = 0.0
            sy = 0.0
            for c in range(C):
                g = gout[c, i, j]
                v00 = 0.0
                v01 = 0.0
                v10 = 0.0
                v11 = 0.0
                if vy0 and vx0:
                    v00 = src[c, y0, x0]
                    gsrc[c, y0, x0] += g * wy0 * wx0
                if vy0 and vx1:
                    v01 = src[c, y0, x1]
                    gsrc[c, y0, x1] += g * wy0 * wx1
                if vy1 and vx0:
                    v10 = src[c, y1, x0]
                    gsrc[c, y1, x0] += g * wy1 * wx0
                if vy1 and vx1:
                    v11 = src[c, y1, x1]
                    gsrc[c, y1, x1] += g * wy1 * wx1
                sx = sx + g * (wy0 * (v01 - v00) + wy1 * (v11 - v10))
                sy = sy + g * (wx0 * (v10 - v00) + wx1 * (v11 - v01))
            gx[i, j] = sx
            gy[i, j] = sy
    return gsrc_arr, gx_arr, gy_arr


cdef inline void _corners(double cx, double cy, double w, double l, double yaw,
                          double* xs, double* ys):
    cdef double c = cos(yaw), s = sin(yaw)
    cdef double hl = 0.5 * l, hw = 0.5 * w
    # counter-clockwise; l runs along the heading
    xs[0] = cx + c * hl - s * hw
    ys[0] = cy + s * hl + c * hw
    xs[1] = cx - c * hl - s * hw
    ys[1] = cy - s * hl + c * hw
    xs[2] = cx - c * hl + s * hw
    ys[2] = cy - s * hl - c * hw
    xs[3] = cx + c * hl + s * hw
    ys[3] = cy + s * hl - c * hw


cdef double _clip_area(double* ax, double* ay, double* bx, double* by):
    # Sutherland-Hodgman: subject a (4 pts) clipped by convex b (4 pts, ccw)
    cdef double px[16]
    cdef double py[16]
    cdef double qx[16]
    cdef double qy[16]
    cdef int n = 4, m, e, k
    cdef double ex0, ey0, ex1, ey1, sx, sy, tx, ty, ds, dt, r, area
    for k in range(4):
        px[k] = ax[k]
        py[k] = ay[k]
    for e in range(4):
        if n == 0:
            return 0.0
        ex0 = bx[e]
        ey0 = by[e]
        ex1 = bx[(e + 1) % 4]
        ey1 = by[(e + 1) % 4]
        m = 0
        for k in range(n):
            sx = px[k]
            sy = py[k]
            tx = px[(k + 1) % n]
            ty = py[(k + 1) % n]
            ds = (ex1 - ex0) * (sy - ey0) - (ey1 - ey0) * (sx - ex0)
            dt = (ex1 - ex0) * (ty - ey0) - (ey1 - ey0) * (tx - ex0)
            if ds >= 0:
                qx[m] = sx
                qy[m] = sy
                m += 1
                if dt < 0:
                    r = ds / (ds - dt)
                    qx[m] = sx + r * (tx - sx)
                    qy[m] = sy + r * (ty - sy)
                    m += 1
            elif dt >= 0:
                r = ds / (ds - dt)
                qx[m] = sx + r * (tx - sx)
                qy[m] = sy + r * (ty - sy)
                m += 1
        n = m
        for k in range(n):
            px[k] = qx[k]
            py[k] = qy[k]
    if n < 3:
        return 0.0
    area = 0.0
    for k in range(n):
        area += px[k] * py[(k + 1) % n] - px[(k + 1) % n] * py[k]
    return fabs(0.5 * area)


def rotated_iou_matrix(double[:, ::1] a, double[:, ::1] b):
    """IoU between every row of ``a`` and ``b``; rows are (cx, cy, w, l, yaw)."""
    cdef Py_ssize_t n = a.shape[0], mm = b.shape[0], i, j
    out_arr = np.zeros((n, mm), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double axs[4]
    cdef double ays[4]
    cdef double bxs[4]
    cdef double bys[4]
    cdef double ra, rb, dx, dy, inter, area_a, area_b, union
    for i in range(n):
        _corners(a[i, 0], a[i, 1], a[i, 2], a[i, 3], a[i, 4], axs, ays)
        area_a = a[i, 2] * a[i, 3]
        ra = 0.5 * sqrt(a[i, 2] * a[i, 2] + a[i, 3] * a[i, 3])
        for j in range(mm):
            rb = 0.5 * sqrt(b[j, 2] * b[j, 2] + b[j, 3] * b[j, 3])
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            if dx * dx + dy * dy >= (ra + rb) * (ra + rb):
                continue
            _corners(b[j, 0], b[j, 1], b[j, 2], b[j, 3], b[j, 4], bxs, bys)
            inter = _clip_area(axs, ays, bxs, bys)
            area_b = b[j, 2] * b[j, 3]
            union = area_a + area_b - inter
            if union > 0:
                out[i, j] = min(1.0, max(0.0, inter / union))
    return out_arr


# ---------------------------------------------------------------- convolution helpers


def depthwise_forward(real[:, :, ::1] xp, real[:, :, ::1] k, Py_ssize_t H, Py_ssize_t W):
    """Per-channel correlation of the padded input ``xp`` with ``k`` (C, kh, kw)."""
    cdef Py_ssize_t C = xp.shape[0], kh = k.shape[1], kw = k.shape[2]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((C, H, W), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t c, i, j, a, b
    cdef double acc
    for c in range(C):
        for i in range(H):
            for j in range(W):
                acc = 0.0
                for a in range(kh):
                    for b in range(kw):
                        acc = acc + k[c, a, b] * xp[c, i + a, j + b]
                out[c, i, j] = acc
    return out_arr


def depthwise_backward(real[:, :, ::1] xp, real[:, :, ::1] k, real[:, :, ::1] g):
    """Returns (grad of padded input, grad of kernel)."""
    cdef Py_ssize_t C = xp.shape[0], kh = k.shape[1], kw = k.shape[2]
    cdef Py_ssize_t H = g.shape[1], W = g.shape[2]
    dtype = np.float32 if real is float else np.float64
    gxp_arr = np.zeros((C, xp.shape[1], xp.shape[2]), dtype=dtype)
    gk_arr = np.zeros((C, kh, kw), dtype=dtype)
    cdef real[:, :, ::1] gxp = gxp_arr
    cdef real[:, :, ::1] gk = gk_arr
    cdef Py_ssize_t c, i, j, a, b
    cdef double acc, gv
    for c in range(C):
        for a in range(kh):
            for b in range(kw):
                acc = 0.0
                for i in range(H):
                    for j in range(W):
                        acc = acc + g[c, i, j] * xp[c, i + a, j + b]
                gk[c, a, b] = acc
        for i in range(H):
            for j in range(W):
                gv = g[c, i, j]
                for a in range(kh):
                    for b in range(kw):
                        gxp[c, i + a, j + b] += gv * k[c, a, b]
    return gxp_arr, gk_arr


def im2col(real[:, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t Ho, Py_ssize_t Wo):
    """(C, kh, kw, Ho, Wo) stride-1 patches of the padded input."""
    cdef Py_ssize_t C = xp.shape[0]
    dtype = np.float32 if real is float else np.float64
    cols_arr = np.empty((C, kh, kw, Ho, Wo), dtype=dtype)
    cdef real[:, :, :, :, ::1] cols = cols_arr
    cdef Py_ssize_t c, a, b, i, j
    for c in range(C):
        for a in range(kh):
            for b in range(kw):
                for i in range(Ho):
                    for j in range(Wo):
                        cols[c, a, b, i, j] = xp[c, i + a, j + b]
    return cols_arr


def col2im(real[:, :, :, :, ::1] cols, Py_ssize_t Hp, Py_ssize_t Wp):
    """Adjoint of :func:`im2col`: scatter-add patches back onto the padded plane."""
    cdef Py_ssize_t C = cols.shape[0], kh = cols.shape[1], kw = cols.shape[2]
    cdef Py_ssize_t Ho = cols.shape[3], Wo = cols.shape[4]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((C, Hp, Wp), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t c, a, b, i, j
    for c in range(C):
        for a in range(kh):
            for b in range(kw):
                for i in range(Ho):
                    for j in range(Wo):
                        out[c, i + a, j + b] += cols[c, a, b, i, j]
    return out_arr
