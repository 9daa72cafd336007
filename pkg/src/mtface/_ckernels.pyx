# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: IoU matrix, greedy NMS, greedy detection matching, smooth-L1."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


cdef inline double _iou(double ax1, double ay1, double ax2, double ay2,
                        double bx1, double by1, double bx2, double by2) nogil:
    cdef double iw = (ax2 if ax2 < bx2 else bx2) - (ax1 if ax1 > bx1 else bx1)
    cdef double ih = (ay2 if ay2 < by2 else by2) - (ay1 if ay1 > by1 else by1)
    if iw < 0.0:
        iw = 0.0
    if ih < 0.0:
        ih = 0.0
    cdef double inter = iw * ih
    cdef double area_a = (ax2 - ax1) * (ay2 - ay1)
    cdef double area_b = (bx2 - bx1) * (by2 - by1)
    cdef double union = area_a + area_b - inter
    if union > 0.0:
        return inter / union
    return 0.0


def iou_matrix(a, b):
    cdef const double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    cdef const double[:, ::1] B = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] O = out
    with nogil:
        for i in range(n):
            for j in range(m):
                O[i, j] = _iou(A[i, 0], A[i, 1], A[i, 2], A[i, 3],
                               B[j, 0], B[j, 1], B[j, 2], B[j, 3])
    return out


def nms(boxes, scores, double thresh):
    cdef const double[:, ::1] Bx = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    order_arr = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable").astype(np.int64)
    cdef const cnp.int64_t[::1] order = order_arr
    cdef Py_ssize_t n = order.shape[0], oi, oj, i, j, nkeep = 0
    supp_arr = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] supp = supp_arr
    keep_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] keep = keep_arr
    with nogil:
        for oi in range(n):
            i = order[oi]
            if supp[i]:
                continue
            keep[nkeep] = i
            nkeep += 1
            for oj in range(oi + 1, n):
                j = order[oj]
                if supp[j]:
                    continue
                if _iou(Bx[i, 0], Bx[i, 1], Bx[i, 2], Bx[i, 3],
                        Bx[j, 0], Bx[j, 1], Bx[j, 2], Bx[j, 3]) > thresh:
                    supp[j] = 1
    return keep_arr[:nkeep].copy()


def greedy_match(dets, gts, gt_ignore, double thresh):
    cdef const double[:, ::1] D = np.ascontiguousarray(dets, dtype=np.float64).reshape(-1, 4)
    cdef const double[:, ::1] G = np.ascontiguousarray(gts, dtype=np.float64).reshape(-1, 4)
    ign_arr = np.ascontiguousarray(gt_ignore, dtype=np.uint8)
    cdef const cnp.uint8_t[::1] ign = ign_arr
    cdef Py_ssize_t n = D.shape[0], m = G.shape[0], d, g, best
    cdef int p
    cdef double best_iou, v
    out_arr = np.full(n, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    taken_arr = np.zeros(max(m, 1), dtype=np.uint8)
    cdef cnp.uint8_t[::1] taken = taken_arr
    if n == 0 or m == 0:
        return out_arr
    with nogil:
        for d in range(n):
            best = -1
            best_iou = thresh
            for p in range(2):
                for g in range(m):
                    if taken[g] or ign[g] != p:
                        continue
                    v = _iou(D[d, 0], D[d, 1], D[d, 2], D[d, 3],
                             G[g, 0], G[g, 1], G[g, 2], G[g, 3])
                    if v >= best_iou and (best < 0 or v > best_iou):
                        best = g
                        best_iou = v
                if best >= 0:
                    break
            if best >= 0:
                taken[best] = 1
                out[d] = best
    return out_arr


def smooth_l1(x):
    xa = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    cdef const double[::1] X = xa
    cdef Py_ssize_t n = X.shape[0], i
    val_arr = np.empty(n, dtype=np.float64)
    grad_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] V = val_arr
    cdef double[::1] Gr = grad_arr
    cdef double v, a
    with nogil:
        for i in range(n):
            v = X[i]
            a = fabs(v)
            if a < 1.0:
                V[i] = 0.5 * v * v
                Gr[i] = v
            else:
                V[i] = a - 0.5
                if v > 0.0:
                    Gr[i] = 1.0
                elif v < 0.0:
                    Gr[i] = -1.0
                else:
                    Gr[i] = 0.0
    return val_arr, grad_arr
