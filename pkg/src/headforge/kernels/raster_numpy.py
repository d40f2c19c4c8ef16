"""Pure-NumPy rasterization kernel (fallback backend).

Loops over triangles in order, vectorizing the per-pixel edge tests over the
triangle's bounding box.  The arithmetic mirrors the Cython kernel expression
for expression so the two backends stay numerically interchangeable.

Rasterization rules: pixel centers at (ix + 0.5, iy + 0.5); a center exactly
on an edge belongs to the triangle for which that edge is a top or left edge
(+Y-down convention); depth ties keep the earlier triangle; no backface
culling (negatively oriented triangles are rasterized by swapping two
vertices for the edge tests only).
"""

from __future__ import annotations

import math

import numpy as np

MIN_DEPTH = 1e-9


def raster_buffers(uv: np.ndarray, z: np.ndarray, tris: np.ndarray,
                   width: int, height: int):
    """Z-buffered coverage of triangles over the pixel grid.

    uv:   (n, 2) float64 continuous pixel coordinates of the vertices
    z:    (n,) float64 camera depths (vertices at z <= 0 invalidate their triangles)
    tris: (m, 3) integer vertex indices

    Returns (depth, tri_id, bary): depth (h, w) float64 with +inf where
    uncovered, tri_id (h, w) int32 with -1 sentinel, and bary (h, w, 3)
    perspective-correct barycentric weights in the triangle's original vertex
    order.
    """
    uv = np.ascontiguousarray(uv, dtype=np.float64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    tris = np.ascontiguousarray(tris, dtype=np.int64)

    depth = np.full((height, width), np.inf, dtype=np.float64)
    tri_id = np.full((height, width), -1, dtype=np.int32)
    bary = np.zeros((height, width, 3), dtype=np.float64)

    xs = uv[:, 0]
    ys = uv[:, 1]

    for t in range(len(tris)):
        ia, ib, ic = tris[t]
        z0, z1, z2 = z[ia], z[ib], z[ic]
        if z0 <= MIN_DEPTH or z1 <= MIN_DEPTH or z2 <= MIN_DEPTH:
            continue
        x0, y0 = xs[ia], ys[ia]
        x1, y1 = xs[ib], ys[ib]
        x2, y2 = xs[ic], ys[ic]

        area2 = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area2 == 0.0:
            continue
        flipped = area2 < 0.0
        if flipped:
            x1, y1, x2, y2 = x2, y2, x1, y1
            z1, z2 = z2, z1
            area2 = -area2

        px_lo = max(0, int(math.ceil(min(x0, x1, x2) - 0.5)))
        px_hi = min(width - 1, int(math.floor(max(x0, x1, x2) - 0.5)))
        py_lo = max(0, int(math.ceil(min(y0, y1, y2) - 0.5)))
        py_hi = min(height - 1, int(math.floor(max(y0, y1, y2) - 0.5)))
        if px_lo > px_hi or py_lo > py_hi:
            continue

        qx = np.arange(px_lo, px_hi + 1, dtype=np.float64)[None, :] + 0.5
        qy = np.arange(py_lo, py_hi + 1, dtype=np.float64)[:, None] + 0.5

        w0 = (x2 - x1) * (qy - y1) - (y2 - y1) * (qx - x1)
        w1 = (x0 - x2) * (qy - y2) - (y0 - y2) * (qx - x2)
        w2 = (x1 - x0) * (qy - y0) - (y1 - y0) * (qx - x0)

        tl0 = _top_left(x2 - x1, y2 - y1)
        tl1 = _top_left(x0 - x2, y0 - y2)
        tl2 = _top_left(x1 - x0, y1 - y0)
        covered = (((w0 > 0) | ((w0 == 0) & tl0))
                   & ((w1 > 0) | ((w1 == 0) & tl1))
                   & ((w2 > 0) | ((w2 == 0) & tl2)))
        if not covered.any():
            continue

        l0 = w0 / area2
        l1 = w1 / area2
        l2 = w2 / area2
        inv = l0 / z0 + l1 / z1 + l2 / z2
        cand = 1.0 / inv

        sub_d = depth[py_lo:py_hi + 1, px_lo:px_hi + 1]
        sub_t = tri_id[py_lo:py_hi + 1, px_lo:px_hi + 1]
        sub_b = bary[py_lo:py_hi + 1, px_lo:px_hi + 1]
        upd = covered & (cand < sub_d)
        if not upd.any():
            continue
        sub_d[upd] = cand[upd]
        sub_t[upd] = t
        b0 = (l0 / z0)[upd] * cand[upd]
        b1 = (l1 / z1)[upd] * cand[upd]
        b2 = (l2 / z2)[upd] * cand[upd]
        if flipped:
            b1, b2 = b2, b1
        sub_b[upd, 0] = b0
        sub_b[upd, 1] = b1
        sub_b[upd, 2] = b2

    return depth, tri_id, bary


def _top_left(dx: float, dy: float) -> bool:
    # Edge of a positively oriented triangle (+Y down): left edges run upward,
    # top edges run right.
    return dy < 0.0 or (dy == 0.0 and dx > 0.0)
