"""Pure-Python/numpy versions of the hot kernels.

Arithmetic order mirrors ``_ckernels.pyx`` so both backends agree bit for bit
on IoU values and smooth-L1 terms.
"""

import numpy as np


def iou_matrix(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    iw = np.maximum(iw, 0.0)
    ih = np.maximum(ih, 0.0)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms(boxes, scores, thresh):
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    # stable sort on -score keeps lowest index first among ties
    order = np.argsort(-scores, kind="stable")
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    iou = iou_matrix(boxes, boxes)
    for oi, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        for j in order[oi + 1:]:
            if not suppressed[j] and iou[i, j] > thresh:
                suppressed[j] = True
    return np.asarray(keep, dtype=np.int64)


def greedy_match(dets, gts, gt_ignore, thresh):
    """Match score-sorted detections to ground truth, one GT per detection.

    Returns the matched GT index per detection, -1 where nothing qualifies.
    Non-ignored GTs are preferred; among them the highest IoU wins, lowest
    index on ties.
    """
    dets = np.ascontiguousarray(dets, dtype=np.float64).reshape(-1, 4)
    gts = np.ascontiguousarray(gts, dtype=np.float64).reshape(-1, 4)
    gt_ignore = np.asarray(gt_ignore, dtype=bool)
    n, m = len(dets), len(gts)
    out = np.full(n, -1, dtype=np.int64)
    if n == 0 or m == 0:
        return out
    iou = iou_matrix(dets, gts)
    taken = np.zeros(m, dtype=bool)
    for d in range(n):
        best, best_iou = -1, thresh
        for pass_ignored in (False, True):
            for g in range(m):
                if taken[g] or gt_ignore[g] != pass_ignored:
                    continue
                if iou[d, g] >= best_iou and (best < 0 or iou[d, g] > best_iou):
                    best, best_iou = g, iou[d, g]
            if best >= 0:
                break
        if best >= 0:
            taken[best] = True
            out[d] = best
    return out


def smooth_l1(x):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    inside = ax < 1.0
    val = np.where(inside, 0.5 * x * x, ax - 0.5)
    grad = np.where(inside, x, np.sign(x))
    return val, grad
