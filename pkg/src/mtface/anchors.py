"""Anchor pyramid, ground-truth assignment and regression target encoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import Box, LandmarkSet, as_face

CENTER_VARIANCE = 0.1
SIZE_VARIANCE = 0.2
POS_IOU = 0.5
NEG_IOU = 0.3

# side lengths at a 640 input; other inputs scale these proportionally
REFERENCE_INPUT = 640
REFERENCE_SIZES = {8: (16.0, 32.0), 16: (64.0, 128.0), 32: (256.0, 512.0)}

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


def default_anchor_sizes(input_size: int, strides) -> tuple[tuple[float, float], ...]:
    scale = input_size / REFERENCE_INPUT
    sizes = []
    for s in strides:
        if s in REFERENCE_SIZES:
            ref = REFERENCE_SIZES[s]
        else:
            # off-table strides keep the 2x / 4x stride pattern of P3
            ref = (2.0 * s, 4.0 * s)
        sizes.append(tuple(r * scale for r in ref))
    return tuple(sizes)


@dataclass
class PyramidSpec:
    input_size: int = 640
    strides: tuple[int, ...] = (8, 16, 32)
    anchor_sizes: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        if self.input_size <= 0 or not self.strides:
            raise ValueError("input_size and strides must be positive")
        for s in self.strides:
            if s <= 0 or self.input_size % s:
                raise ValueError(f"input size {self.input_size} not divisible by stride {s}")
        if self.anchor_sizes is None:
            self.anchor_sizes = default_anchor_sizes(self.input_size, self.strides)
        self.anchor_sizes = tuple(tuple(float(a) for a in lv) for lv in self.anchor_sizes)
        if len(self.anchor_sizes) != len(self.strides):
            raise ValueError("need one anchor-size pair per stride")
        for lv in self.anchor_sizes:
            if len(lv) != 2:
                raise ValueError(f"exactly 2 anchor sizes per level required, got {lv}")
            if any(a <= 0 for a in lv):
                raise ValueError(f"anchor sizes must be positive, got {lv}")

    @property
    def anchors_per_cell(self) -> int:
        return 2

    def level_shapes(self) -> list[tuple[int, int]]:
        return [(self.input_size // s, self.input_size // s) for s in self.strides]

    def num_anchors(self) -> int:
        return sum(h * w * self.anchors_per_cell for h, w in self.level_shapes())


@dataclass
class AnchorSet:
    """Anchors ordered level-major, then row-major over cells, then by size."""

    boxes: np.ndarray  # (N, 4) corner form
    level_offsets: tuple[int, ...]  # start index of each level, plus the total
    spec: PyramidSpec

    def __len__(self) -> int:
        return len(self.boxes)

    def level_slice(self, level: int) -> slice:
        return slice(self.level_offsets[level], self.level_offsets[level + 1])

    def box(self, i: int) -> Box:
        return Box(*self.boxes[i])


def generate_anchors(spec: PyramidSpec) -> AnchorSet:
    chunks, offsets = [], [0]
    for stride, sizes, (h, w) in zip(spec.strides, spec.anchor_sizes, spec.level_shapes()):
        cy, cx = np.meshgrid(stride * (np.arange(h) + 0.5), stride * (np.arange(w) + 0.5), indexing="ij")
        cx = np.repeat(cx.reshape(-1), len(sizes))
        cy = np.repeat(cy.reshape(-1), len(sizes))
        side = np.tile(np.asarray(sizes), h * w)
        chunks.append(np.stack([cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2], axis=1))
        offsets.append(offsets[-1] + len(cx))
    return AnchorSet(np.concatenate(chunks), tuple(offsets), spec)


def _center_form(b: np.ndarray):
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    return b[..., 0] + 0.5 * w, b[..., 1] + 0.5 * h, w, h


def encode_boxes(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    acx, acy, aw, ah = _center_form(np.asarray(anchors, dtype=np.float64))
    gcx, gcy, gw, gh = _center_form(np.asarray(gts, dtype=np.float64))
    return np.stack([
        (gcx - acx) / (aw * CENTER_VARIANCE),
        (gcy - acy) / (ah * CENTER_VARIANCE),
        np.log(gw / aw) / SIZE_VARIANCE,
        np.log(gh / ah) / SIZE_VARIANCE,
    ], axis=-1)


def decode_boxes(anchors: np.ndarray, t: np.ndarray) -> np.ndarray:
    acx, acy, aw, ah = _center_form(np.asarray(anchors, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)
    cx = acx + t[..., 0] * CENTER_VARIANCE * aw
    cy = acy + t[..., 1] * CENTER_VARIANCE * ah
    w = aw * np.exp(t[..., 2] * SIZE_VARIANCE)
    h = ah * np.exp(t[..., 3] * SIZE_VARIANCE)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def encode_box(anchor: Box, gt: Box) -> np.ndarray:
    return encode_boxes(anchor.as_array(), gt.as_array())


def decode_box(anchor: Box, t) -> Box:
    return Box(*decode_boxes(anchor.as_array(), np.asarray(t, dtype=np.float64)))


def encode_landmarks_array(anchors: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """``pts`` is (..., 5, 2); returns (..., 10) as x1, y1, ..., x5, y5."""
    acx, acy, aw, ah = _center_form(np.asarray(anchors, dtype=np.float64))
    pts = np.asarray(pts, dtype=np.float64)
    x = (pts[..., 0] - acx[..., None]) / (aw[..., None] * CENTER_VARIANCE)
    y = (pts[..., 1] - acy[..., None]) / (ah[..., None] * CENTER_VARIANCE)
    return np.stack([x, y], axis=-1).reshape(*pts.shape[:-2], 10)


def decode_landmarks_array(anchors: np.ndarray, codes: np.ndarray) -> np.ndarray:
    acx, acy, aw, ah = _center_form(np.asarray(anchors, dtype=np.float64))
    c = np.asarray(codes, dtype=np.float64).reshape(*np.shape(codes)[:-1], 5, 2)
    x = acx[..., None] + c[..., 0] * CENTER_VARIANCE * aw[..., None]
    y = acy[..., None] + c[..., 1] * CENTER_VARIANCE * ah[..., None]
    return np.stack([x, y], axis=-1)


def encode_landmarks(anchor: Box, lm: LandmarkSet) -> np.ndarray:
    return encode_landmarks_array(anchor.as_array(), lm.as_array())


def decode_landmarks(anchor: Box, codes) -> LandmarkSet:
    return LandmarkSet.from_array(decode_landmarks_array(anchor.as_array(), np.asarray(codes)))


@dataclass
class MatchResult:
    labels: np.ndarray  # (N,) int8: 1 positive, 0 negative, -1 ignore
    gt_index: np.ndarray  # (N,) assigned face for positives, -1 elsewhere
    box_targets: np.ndarray  # (N, 4)
    landmark_targets: np.ndarray  # (N, 10)
    pose_targets: np.ndarray  # (N, 3) degrees
    landmark_valid: np.ndarray  # (N,) bool, positives only
    pose_valid: np.ndarray  # (N,) bool, positives only
    max_iou: np.ndarray = field(repr=False, default=None)

    @property
    def positive(self) -> np.ndarray:
        return self.labels == POSITIVE

    @property
    def negative(self) -> np.ndarray:
        return self.labels == NEGATIVE


def match(anchors: AnchorSet | np.ndarray, faces, pos_iou: float = POS_IOU, neg_iou: float = NEG_IOU) -> MatchResult:
    """Label anchors against faces and build regression targets for the positives.

    An anchor is positive at IoU >= ``pos_iou`` with its best face, negative below
    ``neg_iou``, ignored in between. Every face additionally claims its own best
    anchor (lowest index on ties); when two faces claim the same anchor the
    higher IoU keeps it, then the lower face index.
    """
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    n = len(boxes)
    if n == 0:
        raise ValueError("empty anchor set")
    faces = [as_face(f) for f in faces]
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    gt_index = np.full(n, -1, dtype=np.int64)
    box_t = np.zeros((n, 4))
    lm_t = np.zeros((n, 10))
    pose_t = np.zeros((n, 3))
    lm_valid = np.zeros(n, dtype=bool)
    pose_valid = np.zeros(n, dtype=bool)
    if not faces:
        return MatchResult(labels, gt_index, box_t, lm_t, pose_t, lm_valid, pose_valid, np.zeros(n))

    gt_boxes = np.stack([f.box.as_array() for f in faces])
    iou = kernels.iou_matrix(boxes, gt_boxes)
    best_face = np.argmax(iou, axis=1)
    max_iou = iou[np.arange(n), best_face]
    labels[max_iou >= neg_iou] = IGNORE
    labels[max_iou >= pos_iou] = POSITIVE
    assigned = np.where(labels == POSITIVE, best_face, -1)

    claims: dict[int, tuple[float, int]] = {}
    for fi in range(len(faces)):
        a = int(np.argmax(iou[:, fi]))
        v = float(iou[a, fi])
        if a not in claims or v > claims[a][0]:
            claims[a] = (v, fi)
    for a, (_, fi) in claims.items():
        labels[a] = POSITIVE
        assigned[a] = fi

    pos = np.flatnonzero(labels == POSITIVE)
    gi = assigned[pos]
    gt_index[pos] = gi
    box_t[pos] = encode_boxes(boxes[pos], gt_boxes[gi])
    lm_arr = np.stack([f.landmarks.as_array() for f in faces])
    lm_t[pos] = encode_landmarks_array(boxes[pos], lm_arr[gi])
    pose_t[pos] = np.array([f.pose for f in faces], dtype=np.float64)[gi]
    lm_valid[pos] = np.array([f.landmark_valid for f in faces])[gi]
    pose_valid[pos] = np.array([f.pose_valid for f in faces])[gi]
    return MatchResult(labels, gt_index, box_t, lm_t, pose_t, lm_valid, pose_valid, max_iou)
