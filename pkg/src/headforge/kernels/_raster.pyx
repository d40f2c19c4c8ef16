# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled rasterization kernel.

Same contract and arithmetic as raster_numpy.raster_buffers; see that module
for the rasterization rules.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport ceil, floor, INFINITY

cnp.import_array()

DEF MIN_DEPTH = 1e-9


cdef inline bint _top_left(double dx, double dy) nogil:
    return dy < 0.0 or (dy == 0.0 and dx > 0.0)


def raster_buffers(uv, z, tris, int width, int height):
    cdef double[:, ::1] uv_v = np.ascontiguousarray(uv, dtype=np.float64)
    cdef double[::1] z_v = np.ascontiguousarray(z, dtype=np.float64)
    cdef long long[:, ::1] tris_v = np.ascontiguousarray(tris, dtype=np.int64)

    depth_arr = np.full((height, width), np.inf, dtype=np.float64)
    tri_arr = np.full((height, width), -1, dtype=np.int32)
    bary_arr = np.zeros((height, width, 3), dtype=np.float64)
    cdef double[:, ::1] depth = depth_arr
    cdef int[:, ::1] tri_id = tri_arr
    cdef double[:, :, ::1] bary = bary_arr

    cdef Py_ssize_t t, ia, ib, ic, px, py
    cdef int px_lo, px_hi, py_lo, py_hi
    cdef double x0, y0, x1, y1, x2, y2, z0, z1, z2
    cdef double area2, qx, qy, w0, w1, w2, l0, l1, l2, inv, cand
    cdef double b0, b1, b2, tmp
    cdef double xmin, xmax, ymin, ymax
    cdef bint flipped, tl0, tl1, tl2, cov0, cov1, cov2

    for t in range(tris_v.shape[0]):
        ia = tris_v[t, 0]
        ib = tris_v[t, 1]
        ic = tris_v[t, 2]
        z0 = z_v[ia]
        z1 = z_v[ib]
        z2 = z_v[ic]
        if z0 <= MIN_DEPTH or z1 <= MIN_DEPTH or z2 <= MIN_DEPTH:
            continue
        x0 = uv_v[ia, 0]
        y0 = uv_v[ia, 1]
        x1 = uv_v[ib, 0]
        y1 = uv_v[ib, 1]
        x2 = uv_v[ic, 0]
        y2 = uv_v[ic, 1]

        area2 = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area2 == 0.0:
            continue
        flipped = area2 < 0.0
        if flipped:
            tmp = x1; x1 = x2; x2 = tmp
            tmp = y1; y1 = y2; y2 = tmp
            tmp = z1; z1 = z2; z2 = tmp
            area2 = -area2

        xmin = min(min(x0, x1), x2)
        xmax = max(max(x0, x1), x2)
        ymin = min(min(y0, y1), y2)
        ymax = max(max(y0, y1), y2)
        px_lo = <int>ceil(xmin - 0.5)
        px_hi = <int>floor(xmax - 0.5)
        py_lo = <int>ceil(ymin - 0.5)
        py_hi = <int>floor(ymax - 0.5)
        if px_lo < 0:
            px_lo = 0
        if py_lo < 0:
            py_lo = 0
        if px_hi > width - 1:
            px_hi = width - 1
        if py_hi > height - 1:
            py_hi = height - 1
        if px_lo > px_hi or py_lo > py_hi:
            continue

        tl0 = _top_left(x2 - x1, y2 - y1)
        tl1 = _top_left(x0 - x2, y0 - y2)
        tl2 = _top_left(x1 - x0, y1 - y0)

        for py in range(py_lo, py_hi + 1):
            qy = py + 0.5
            for px in range(px_lo, px_hi + 1):
                qx = px + 0.5
                w0 = (x2 - x1) * (qy - y1) - (y2 - y1) * (qx - x1)
                w1 = (x0 - x2) * (qy - y2) - (y0 - y2) * (qx - x2)
                w2 = (x1 - x0) * (qy - y0) - (y1 - y0) * (qx - x0)
                cov0 = w0 > 0 or (w0 == 0 and tl0)
                cov1 = w1 > 0 or (w1 == 0 and tl1)
                cov2 = w2 > 0 or (w2 == 0 and tl2)
                if not (cov0 and cov1 and cov2):
                    continue
                l0 = w0 / area2
                l1 = w1 / area2
                l2 = w2 / area2
                inv = l0 / z0 + l1 / z1 + l2 / z2
                cand = 1.0 / inv
                if cand >= depth[py, px]:
                    continue
                depth[py, px] = cand
                tri_id[py, px] = <int>t
                b0 = (l0 / z0) * cand
                b1 = (l1 / z1) * cand
                b2 = (l2 / z2) * cand
                if flipped:
                    tmp = b1; b1 = b2; b2 = tmp
                bary[py, px, 0] = b0
                bary[py, px, 1] = b1
                bary[py, px, 2] = b2

    return depth_arr, tri_arr, bary_arr
