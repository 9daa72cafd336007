"""Boxes, landmark sets and the size predicates used by matching and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

SMALL_FACE_SIDE = 25.0


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in corner form, pixels."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {vals}")

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def scaled(self, s: float, dx: float = 0.0, dy: float = 0.0) -> "Box":
        return Box(self.x1 * s + dx, self.y1 * s + dy, self.x2 * s + dx, self.y2 * s + dy)


LANDMARK_NAMES = ("left_eye", "right_eye", "nose", "left_mouth", "right_mouth")


@dataclass(frozen=True)
class LandmarkSet:
    """Five (x, y) points: left eye, right eye, nose, left and right mouth corner."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.points)
        if len(pts) != 5:
            raise ValueError(f"expected 5 landmarks, got {len(pts)}")
        if not all(math.isfinite(v) for p in pts for v in p):
            raise ValueError("non-finite landmark coordinate")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_array(cls, arr) -> "LandmarkSet":
        arr = np.asarray(arr, dtype=np.float64).reshape(5, 2)
        return cls(tuple((float(x), float(y)) for x, y in arr))

    def as_array(self) -> np.ndarray:
        return np.array(self.points, dtype=np.float64)

    def scaled(self, s: float, dx: float = 0.0, dy: float = 0.0) -> "LandmarkSet":
        return LandmarkSet(tuple((x * s + dx, y * s + dy) for x, y in self.points))


def iou(a: Box, b: Box) -> float:
    return float(kernels.iou_matrix(a.as_array()[None], b.as_array()[None])[0, 0])


def is_small_face(b: Box, side: float = SMALL_FACE_SIDE) -> bool:
    # inclusive on both sides: a box of exactly side x side counts as small
    return b.width <= side and b.height <= side


def face_scale(b: Box) -> float:
    return math.sqrt(b.width * b.height)


def boxes_to_array(boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.stack([b.as_array() for b in boxes])


@dataclass(frozen=True)
class Face:
    """Ground-truth annotation of one face.

    ``pose`` is (yaw, pitch, roll) in degrees. The validity flags mark whether
    the landmark and pose annotations may be used as training targets.
    """

    box: Box
    landmarks: LandmarkSet
    pose: tuple[float, float, float] = (0.0, 0.0, 0.0)
    landmark_valid: bool = True
    pose_valid: bool = True


def as_face(obj) -> Face:
    if isinstance(obj, Face):
        return obj
    if hasattr(obj, "box") and hasattr(obj, "landmarks"):
        return Face(obj.box, obj.landmarks, tuple(getattr(obj, "pose", (0.0, 0.0, 0.0))),
                    bool(getattr(obj, "landmark_valid", True)), bool(getattr(obj, "pose_valid", True)))
    box, lm, pose = obj[:3]
    pose_valid = bool(obj[3]) if len(obj) > 3 else True
    return Face(box, lm, tuple(float(p) for p in pose), True, pose_valid)
