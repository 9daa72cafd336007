"""66-bin head-pose codec: 3-degree bins spanning [-99, 99)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .numerics import softmax

log = logging.getLogger(__name__)

N_BINS = 66
BIN_WIDTH = 3.0
ANGLE_MIN = -99.0
ANGLE_MAX = 99.0
CLAMP_MAX = 98.999
BIN_CENTERS = ANGLE_MIN + BIN_WIDTH * np.arange(N_BINS) + 0.5 * BIN_WIDTH


@dataclass(frozen=True)
class PoseAngles:
    yaw: float
    pitch: float
    roll: float

    def as_array(self) -> np.ndarray:
        return np.array([self.yaw, self.pitch, self.roll], dtype=np.float64)


def encode_bin(angle) -> int:
    a = float(angle)
    if not (ANGLE_MIN <= a < ANGLE_MAX):
        raise ValueError(f"angle {a} outside [{ANGLE_MIN}, {ANGLE_MAX})")
    return int(np.floor((a - ANGLE_MIN) / BIN_WIDTH))


def encode_bins(angles) -> np.ndarray:
    a = np.asarray(angles, dtype=np.float64)
    if np.any((a < ANGLE_MIN) | (a >= ANGLE_MAX)):
        raise ValueError("angle outside encodable range")
    return np.floor((a - ANGLE_MIN) / BIN_WIDTH).astype(np.int64)


def clamp_angles(angles) -> np.ndarray:
    """Clamp training targets into the codec range, warning when anything moved."""
    a = np.asarray(angles, dtype=np.float64)
    c = np.clip(a, ANGLE_MIN, CLAMP_MAX)
    if np.any(c != a):
        log.warning("clamped %d pose angle(s) into [%s, %s]", int(np.sum(c != a)), ANGLE_MIN, CLAMP_MAX)
    return c


def decode_expected(logits, axis: int = -1) -> np.ndarray | float:
    """Probability-weighted bin centre of 66-bin logits."""
    p = softmax(logits, axis=axis)
    if p.shape[axis] != N_BINS:
        raise ValueError(f"expected {N_BINS} logits along axis {axis}, got {p.shape[axis]}")
    out = np.tensordot(p, BIN_CENTERS, axes=([axis], [0]))
    return float(out) if np.ndim(out) == 0 else out
