# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled box kernels: pairwise IoU and greedy NMS.

Semantics match ``mitodet.kernels.python_ref`` exactly (same arithmetic,
same tie-breaking); the suppression loops run in C.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND_NAME = "compiled"


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU between (N, 4) and (M, 4) x1,y1,x2,y2 boxes -> (N, M)."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] a = \
        np.ascontiguousarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] b = \
        np.ascontiguousarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, m), dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double ax1, ay1, ax2, ay2, area_a
    cdef double ix1, iy1, ix2, iy2, iw, ih, inter, union

    for i in range(n):
        ax1 = a[i, 0]; ay1 = a[i, 1]; ax2 = a[i, 2]; ay2 = a[i, 3]
        area_a = (ax2 - ax1) * (ay2 - ay1)
        for j in range(m):
            ix1 = max(ax1, b[j, 0])
            iy1 = max(ay1, b[j, 1])
            ix2 = min(ax2, b[j, 2])
            iy2 = min(ay2, b[j, 3])
            iw = max(ix2 - ix1, 0.0)
            ih = max(iy2 - iy1, 0.0)
            inter = iw * ih
            union = area_a + (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]) - inter
            if union > 0:
                out[i, j] = inter / union
    return out


def nms(boxes, scores, double iou_threshold):
    """Greedy NMS; returns kept indices (int64) in descending-score order.

    Score ties are broken by lower input index.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=2] bx = \
        np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] sc = \
        np.asarray(scores, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t n = bx.shape[0]
    if sc.shape[0] != n:
        raise ValueError("boxes and scores length mismatch")
    if n == 0:
        return np.empty(0, dtype=np.int64)

    cdef cnp.ndarray[cnp.int64_t, ndim=1] order = \
        np.argsort(-sc, kind="stable").astype(np.int64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] suppressed = np.zeros(n, dtype=np.uint8)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] keep = np.empty(n, dtype=np.int64)
    cdef Py_ssize_t n_keep = 0
    cdef Py_ssize_t oi, oj
    cdef cnp.int64_t i, j
    cdef double x1, y1, x2, y2, area_i
    cdef double ix1, iy1, ix2, iy2, iw, ih, inter, union, iou

    for oi in range(n):
        i = order[oi]
        if suppressed[i]:
            continue
        keep[n_keep] = i
        n_keep += 1
        x1 = bx[i, 0]; y1 = bx[i, 1]; x2 = bx[i, 2]; y2 = bx[i, 3]
        area_i = (x2 - x1) * (y2 - y1)
        for oj in range(oi + 1, n):
            j = order[oj]
            if suppressed[j]:
                continue
            ix1 = max(x1, bx[j, 0])
            iy1 = max(y1, bx[j, 1])
            ix2 = min(x2, bx[j, 2])
            iy2 = min(y2, bx[j, 3])
            iw = max(ix2 - ix1, 0.0)
            ih = max(iy2 - iy1, 0.0)
            inter = iw * ih
            union = area_i + (bx[j, 2] - bx[j, 0]) * (bx[j, 3] - bx[j, 1]) - inter
            iou = inter / union if union > 0 else 0.0
            if iou > iou_threshold:
                suppressed[j] = 1
    return keep[:n_keep].copy()
