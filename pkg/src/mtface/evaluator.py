"""Detection AP, landmark NME and pose MAE on held-out scenes."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .geometry import Box, LandmarkSet, face_scale

SPLITS = {"small": (0.0, 25.0), "medium": (25.0, 96.0), "large": (96.0, math.inf)}


def _scales(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.sqrt((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]))


def average_precision(
    det_boxes: Sequence[np.ndarray],
    det_scores: Sequence[np.ndarray],
    gt_boxes: Sequence[np.ndarray],
    iou_thr: float = 0.5,
    scale_range: tuple[float, float] | None = None,
) -> float | None:
    """All-points interpolated AP over a set of scenes.

    Per scene, detections are matched greedily in descending score, each GT at
    most once. With ``scale_range``, GTs outside it are ignored: detections
    matched to them are dropped, and unmatched detections only count as false
    positives when their own scale lies in the range. Returns None without GT.
    """
    records = []  # (score, scene, order, is_tp)
    n_gt = 0
    for si, (db, ds, gb) in enumerate(zip(det_boxes, det_scores, gt_boxes)):
        db = np.asarray(db, dtype=np.float64).reshape(-1, 4)
        ds = np.asarray(ds, dtype=np.float64).reshape(-1)
        gb = np.asarray(gb, dtype=np.float64).reshape(-1, 4)
        if scale_range is None:
            ignore = np.zeros(len(gb), dtype=bool)
        else:
            sc = _scales(gb)
            ignore = (sc < scale_range[0]) | (sc >= scale_range[1])
        n_gt += int((~ignore).sum())
        order = np.argsort(-ds, kind="stable")
        matched = kernels.greedy_match(db[order], gb, ignore, iou_thr)
        det_sc = _scales(db[order])
        for rank, (di, g) in enumerate(zip(order, matched)):
            if g >= 0:
                if ignore[g]:
                    continue
                records.append((ds[di], si, rank, True))
            else:
                if scale_range is not None and not (scale_range[0] <= det_sc[rank] < scale_range[1]):
                    continue
                records.append((ds[di], si, rank, False))
    if n_gt == 0:
        return None
    if not records:
        return 0.0
    records.sort(key=lambda r: (-r[0], r[1], r[2]))
    tp = np.array([r[3] for r in records], dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    return _interpolated_area(recall, precision)


def _interpolated_area(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))


def landmark_nme(pred: LandmarkSet | np.ndarray, gt: LandmarkSet | np.ndarray, box: Box) -> float:
    """Mean point-to-point distance over the 5 landmarks divided by sqrt(w * h) of ``box``."""
    p = pred.as_array() if isinstance(pred, LandmarkSet) else np.asarray(pred, dtype=np.float64).reshape(5, 2)
    g = gt.as_array() if isinstance(gt, LandmarkSet) else np.asarray(gt, dtype=np.float64).reshape(5, 2)
    return float(np.mean(np.linalg.norm(p - g, axis=1)) / face_scale(box))


def pose_mae(pred, gt) -> dict[str, float]:
    """Per-axis mean absolute error (yaw, pitch, roll) and their average."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(p) != len(g):
        raise ValueError("prediction and ground-truth counts differ")
    if len(p) == 0:
        return {"yaw": math.nan, "pitch": math.nan, "roll": math.nan, "mean": math.nan}
    err = np.abs(p - g).mean(axis=0)
    return {"yaw": float(err[0]), "pitch": float(err[1]), "roll": float(err[2]), "mean": float(err.mean())}


@dataclass
class EvalReport:
    ap: float | None
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None
    nme: float
    mae_yaw: float
    mae_pitch: float
    mae_roll: float
    mae_mean: float
    n_scenes: int = 0
    n_gt: int = 0
    n_landmark_matched: int = 0
    n_pose_matched: int = 0
    counts: dict = field(default_factory=dict)

    def as_record(self) -> dict:
        d = asdict(self)
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def evaluate_detections(scenes, dets, iou_thr: float = 0.5, report_score: float = 0.5,
                        splits: dict[str, tuple[float, float]] | None = None) -> EvalReport:
    """Score detections (``model.Detections`` per scene) against scene annotations."""
    splits = splits or SPLITS
    gt = [s.boxes for s in scenes]
    db = [d.boxes for d in dets]
    ds = [d.scores for d in dets]
    ap = average_precision(db, ds, gt, iou_thr)
    split_ap = {name: average_precision(db, ds, gt, iou_thr, rng) for name, rng in splits.items()}
    counts = {name: int(sum(((_scales(g) >= lo) & (_scales(g) < hi)).sum() for g in gt)) for name, (lo, hi) in splits.items()}

    nmes, p_pred, p_gt = [], [], []
    for sc, d in zip(scenes, dets):
        if not sc.faces:
            continue
        keep = d.scores >= report_score
        boxes, order = d.boxes[keep], np.argsort(-d.scores[keep], kind="stable")
        matched = kernels.greedy_match(boxes[order], sc.boxes, np.zeros(len(sc.faces), dtype=bool), iou_thr)
        lms, poses = d.landmarks[keep][order], d.poses[keep][order]
        for k, g in enumerate(matched):
            if g < 0:
                continue
            face = sc.faces[g]
            if face.landmark_valid:
                nmes.append(landmark_nme(lms[k], face.landmarks, face.box))
            if face.pose_valid:
                p_pred.append(poses[k])
                p_gt.append(face.pose)
    mae = pose_mae(np.array(p_pred).reshape(-1, 3), np.array(p_gt).reshape(-1, 3))
    return EvalReport(
        ap=ap,
        ap_small=split_ap.get("small"),
        ap_medium=split_ap.get("medium"),
        ap_large=split_ap.get("large"),
        nme=float(np.mean(nmes)) if nmes else math.nan,
        mae_yaw=mae["yaw"],
        mae_pitch=mae["pitch"],
        mae_roll=mae["roll"],
        mae_mean=mae["mean"],
        n_scenes=len(scenes),
        n_gt=int(sum(len(g) for g in gt)),
        n_landmark_matched=len(nmes),
        n_pose_matched=len(p_pred),
        counts=counts,
    )
