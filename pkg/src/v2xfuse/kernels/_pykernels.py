"""Reference implementations of the compiled kernels (numpy + pure Python)."""

import math

import numpy as np


def _corner_terms(src, px, py):
    C, H, W = src.shape
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    wx1 = px - x0
    wy1 = py - y0
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1
    terms = []
    for dy, wy in ((0, wy0), (1, wy1)):
        for dx, wx in ((0, wx0), (1, wx1)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            flat = np.where(valid, np.clip(yi, 0, H - 1) * W + np.clip(xi, 0, W - 1), 0)
            terms.append((dy, dx, valid, flat, wy, wx))
    return terms, (wx0, wx1, wy0, wy1)


def bilinear_forward(src, px, py):
    C, H, W = src.shape
    flat_src = src.reshape(C, H * W)
    terms, _ = _corner_terms(src, px, py)
    out = np.zeros((C,) + px.shape, dtype=src.dtype)
    for _, _, valid, flat, wy, wx in terms:
        w = (wy * wx * valid).astype(src.dtype)
        out += flat_src[:, flat] * w
    return out


def bilinear_backward(src, px, py, gout):
    C, H, W = src.shape
    flat_src = src.reshape(C, H * W)
    terms, (wx0, wx1, wy0, wy1) = _corner_terms(src, px, py)
    gsrc = np.zeros(C * H * W, dtype=np.float64)
    vals = {}
    chan_offset = (np.arange(C) * (H * W))[:, None]
    for dy, dx, valid, flat, wy, wx in terms:
        v = flat_src[:, flat] * valid
        vals[(dy, dx)] = v
        w = wy * wx * valid
        idx = (chan_offset + flat.reshape(1, -1)).ravel()
        contrib = (gout * w).reshape(C, -1).ravel()
        gsrc += np.bincount(idx, weights=contrib, minlength=C * H * W)
    v00, v01, v10, v11 = vals[(0, 0)], vals[(0, 1)], vals[(1, 0)], vals[(1, 1)]
    gx = np.sum(gout * (wy0 * (v01 - v00) + wy1 * (v11 - v10)), axis=0)
    gy = np.sum(gout * (wx0 * (v10 - v00) + wx1 * (v11 - v01)), axis=0)
    dt = src.dtype
    return gsrc.reshape(C, H, W).astype(dt), gx.astype(dt), gy.astype(dt)


def box_corners(cx, cy, w, l, yaw):
    """Counter-clockwise corners; ``l`` runs along the heading."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = 0.5 * l, 0.5 * w
    return [
        (cx + c * hl - s * hw, cy + s * hl + c * hw),
        (cx - c * hl - s * hw, cy - s * hl + c * hw),
        (cx - c * hl + s * hw, cy - s * hl - c * hw),
        (cx + c * hl + s * hw, cy + s * hl - c * hw),
    ]


def clip_polygon(subject, clip):
    """Sutherland-Hodgman clipping of ``subject`` by the convex ccw polygon ``clip``."""
    out = list(subject)
    n = len(clip)
    for e in range(n):
        if not out:
            break
        ex0, ey0 = clip[e]
        ex1, ey1 = clip[(e + 1) % n]
        inp, out = out, []
        for k in range(len(inp)):
            sx, sy = inp[k]
            tx, ty = inp[(k + 1) % len(inp)]
            ds = (ex1 - ex0) * (sy - ey0) - (ey1 - ey0) * (sx - ex0)
            dt = (ex1 - ex0) * (ty - ey0) - (ey1 - ey0) * (tx - ex0)
            if ds >= 0:
                out.append((sx, sy))
                if dt < 0:
                    r = ds / (ds - dt)
                    out.append((sx + r * (tx - sx), sy + r * (ty - sy)))
            elif dt >= 0:
                r = ds / (ds - dt)
                out.append((sx + r * (tx - sx), sy + r * (ty - sy)))
    return out


def polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    acc = 0.0
    for k in range(len(poly)):
        x0, y0 = poly[k]
        x1, y1 = poly[(k + 1) % len(poly)]
        acc += x0 * y1 - x1 * y0
    return abs(0.5 * acc)


def rotated_iou_matrix(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[0]))
    b_corners = [box_corners(*row) for row in b]
    b_radius = 0.5 * np.hypot(b[:, 2], b[:, 3])
    for i, row in enumerate(a):
        ca = box_corners(*row)
        ra = 0.5 * math.hypot(row[2], row[3])
        area_a = row[2] * row[3]
        for j in range(b.shape[0]):
            dx = row[0] - b[j, 0]
            dy = row[1] - b[j, 1]
            if dx * dx + dy * dy >= (ra + b_radius[j]) ** 2:
                continue
            inter = polygon_area(clip_polygon(ca, b_corners[j]))
            union = area_a + b[j, 2] * b[j, 3] - inter
            if union > 0:
                out[i, j] = min(1.0, max(0.0, inter / union))
    return out


# ---------------------------------------------------------------- convolution helpers


def depthwise_forward(xp, k, H, W):
    C, kh, kw = k.shape
    out = np.zeros((C, H, W), dtype=xp.dtype)
    for a in range(kh):
        for b in range(kw):
            out += k[:, a, b, None, None] * xp[:, a:a + H, b:b + W]
    return out


def depthwise_backward(xp, k, g):
    C, kh, kw = k.shape
    _, H, W = g.shape
    gxp = np.zeros(xp.shape, dtype=xp.dtype)
    gk = np.zeros(k.shape, dtype=xp.dtype)
    for a in range(kh):
        for b in range(kw):
            gk[:, a, b] = np.einsum("chw,chw->c", g, xp[:, a:a + H, b:b + W])
            gxp[:, a:a + H, b:b + W] += k[:, a, b, None, None] * g
    return gxp, gk


def im2col(xp, kh, kw, Ho, Wo):
    cols = np.empty((xp.shape[0], kh, kw, Ho, Wo), dtype=xp.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[:, a, b] = xp[:, a:a + Ho, b:b + Wo]
    return cols


def col2im(cols, Hp, Wp):
    C, kh, kw, Ho, Wo = cols.shape
    out = np.zeros((C, Hp, Wp), dtype=cols.dtype)
    for a in range(kh):
        for b in range(kw):
            out[:, a:a + Ho, b:b + Wo] += cols[:, a, b]
    return out
