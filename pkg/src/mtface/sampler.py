"""Online feedback sampling.

Two mechanisms: a per-iteration trigger that swaps the next batch for 2x2
half-scale mosaics when small faces contribute too little box loss, and an
epoch-end pass that re-weights training scenes by their detection errors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .geometry import face_scale
from .synthworld import Scene, SceneFace

log = logging.getLogger(__name__)


@dataclass
class FeedbackConfig:
    ratio_threshold: float = 0.35
    small_side: float = 25.0
    score_threshold: float = 0.5
    nms_iou: float = 0.4
    match_iou: float = 0.5
    annotation_floor: float = 35.0

    def __post_init__(self):
        if not (0.0 <= self.ratio_threshold < 1.0):
            raise ValueError("ratio_threshold must lie in [0, 1)")
        if self.small_side <= 0:
            raise ValueError("small_side must be positive")
        if not (0.0 <= self.score_threshold <= 1.0):
            raise ValueError("score_threshold must lie in [0, 1]")


@dataclass
class FeedbackSet:
    """Sampling weights of the training scenes; every scene keeps weight >= 1."""

    weights: np.ndarray
    epoch: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.int64)
        if np.any(self.weights < 1):
            raise ValueError("feedback weights must be >= 1")

    @classmethod
    def uniform(cls, n: int) -> "FeedbackSet":
        return cls(np.ones(n, dtype=np.int64))

    def draw_epoch(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Scene order for one epoch.

        The set holds ``weights[i]`` copies of scene ``i``; ``size`` items
        (default: the number of scenes) are drawn from it without replacement.
        """
        n = len(self.weights)
        size = n if size is None else size
        pool = np.repeat(np.arange(n), self.weights)
        return rng.permutation(pool)[:size]

    def as_record(self) -> dict:
        return {"epoch": self.epoch, "weights": {str(i): int(w) for i, w in enumerate(self.weights)}}


def small_box_ratio(face_losses: Sequence[float], small: Sequence[bool]) -> float | None:
    """Share of box loss from small faces; None when the batch has no box loss."""
    face_losses = np.asarray(face_losses, dtype=np.float64)
    small = np.asarray(small, dtype=bool)
    total = float(face_losses.sum())
    if total <= 0.0:
        return None
    return float(face_losses[small].sum()) / total


def stitch_trigger(face_losses, small, threshold: float = 0.35) -> bool:
    """True iff small-face box loss / total box loss is below ``threshold``.

    A batch without any small face has ratio 0 and therefore triggers.
    """
    ratio = small_box_ratio(face_losses, small)
    if ratio is None:
        return False
    if not np.any(np.asarray(small, dtype=bool)):
        log.debug("no small faces in batch; ratio 0 triggers stitching")
    return ratio < threshold


def stitch_augment(scenes: Sequence[Scene], annotation_floor: float = 35.0) -> Scene:
    """Compose four equal-size scenes into one 2x2 mosaic at half scale.

    Scene k goes to quadrant (k % 2, k // 2). Boxes, landmarks and latent
    geometry are scaled and shifted; pose angles are kept. Faces whose new
    side is below ``annotation_floor`` lose landmark and pose validity.
    """
    if len(scenes) != 4:
        raise ValueError(f"stitching needs exactly 4 scenes, got {len(scenes)}")
    canvas = scenes[0].canvas
    if any(s.canvas != canvas for s in scenes):
        raise ValueError("scenes differ in canvas size")
    half = canvas / 2
    faces: list[SceneFace] = []
    for k, sc in enumerate(scenes):
        ox, oy = half * (k % 2), half * (k // 2)
        for f in sc.faces:
            box = f.box.scaled(0.5, ox, oy)
            keep = face_scale(box) >= annotation_floor
            lat = f.latent
            new_lat = (lat[0] * 0.5 + ox, lat[1] * 0.5 + oy, lat[2] * 0.5, *lat[3:]) if lat else ()
            faces.append(SceneFace(box, f.landmarks.scaled(0.5, ox, oy), f.pose,
                                   f.landmark_valid and keep, f.pose_valid and keep, new_lat))
    return Scene(canvas, faces, scenes[0].seed, -1)


def count_errors(det_boxes: np.ndarray, gt_boxes: np.ndarray, iou_thr: float = 0.5) -> tuple[int, int]:
    """(#FP, #FN): detections below ``iou_thr`` with every GT, GTs with no detection at ``iou_thr``."""
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return len(det_boxes), 0
    if len(det_boxes) == 0:
        return 0, len(gt_boxes)
    iou = kernels.iou_matrix(det_boxes, gt_boxes)
    fp = int(np.sum(iou.max(axis=1) < iou_thr))
    fn = int(np.sum(iou.max(axis=0) < iou_thr))
    return fp, fn


def epoch_feedback(
    detect: Callable[[Sequence[int]], list[np.ndarray]],
    scenes: Sequence[Scene],
    fset: FeedbackSet,
    cfg: FeedbackConfig,
) -> FeedbackSet:
    """Re-weight scenes as ``1 + #FP + #FN`` from a detection pass over the training set.

    ``detect(indices)`` returns one ``(K, 4)`` array of kept boxes per scene,
    already filtered at ``cfg.score_threshold`` and NMS'd at ``cfg.nms_iou``.
    """
    boxes = detect(list(range(len(scenes))))
    weights = np.ones(len(scenes), dtype=np.int64)
    for i, (sc, det) in enumerate(zip(scenes, boxes)):
        fp, fn = count_errors(det, sc.boxes, cfg.match_iou)
        weights[i] = 1 + fp + fn
    return FeedbackSet(weights, fset.epoch + 1)
