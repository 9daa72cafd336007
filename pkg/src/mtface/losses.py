"""Task losses, hard-negative mining and the uncertainty-weighted combination.

Every loss returns its value together with the gradient with respect to the
predictions it consumed; arrays are flat over anchors (a batch is simply the
concatenation of its scenes' anchors).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .anchors import NEGATIVE, POSITIVE
from .numerics import log_softmax, softmax
from .pose_codec import BIN_CENTERS, clamp_angles, encode_bins

POSE_BETA = 0.001
OHEM_RATIO = 3
HEURISTIC_WEIGHTS = (2.0, 1.0, 1.0, 0.25)
LOSS_NAMES = ("cls", "box", "pts", "pose")


def per_anchor_ce(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Binary softmax cross-entropy per anchor; positives target class 1."""
    lsm = log_softmax(logits, axis=-1)
    target = (labels == POSITIVE).astype(np.int64)
    return -lsm[np.arange(len(target)), target]


def ohem_select(ce: np.ndarray, labels: np.ndarray, ratio: int = OHEM_RATIO, min_negatives: int = 0) -> np.ndarray:
    """Keep every positive plus the hardest ``min(ratio * #pos, #neg)`` negatives.

    With no positives, ``min_negatives`` hardest negatives are kept instead
    (none by default). Ties in loss go to the lower anchor index.
    """
    ce = np.asarray(ce, dtype=np.float64)
    labels = np.asarray(labels)
    mask = labels == POSITIVE
    n_pos = int(mask.sum())
    neg_idx = np.flatnonzero(labels == NEGATIVE)
    want = ratio * n_pos if n_pos > 0 else min_negatives
    k = min(want, len(neg_idx))
    if k > 0:
        order = np.argsort(-ce[neg_idx], kind="stable")
        mask[neg_idx[order[:k]]] = True
    return mask


def cls_loss(logits: np.ndarray, labels: np.ndarray, selection: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the selected anchors and its gradient w.r.t. ``logits``."""
    selection = np.asarray(selection, dtype=bool)
    n_sel = int(selection.sum())
    if n_sel == 0:
        raise ValueError("classification loss over an empty selection")
    ce = per_anchor_ce(logits, labels)
    value = float(ce[selection].sum() / n_sel)
    p = softmax(logits, axis=-1)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(labels)), (labels == POSITIVE).astype(np.int64)] = 1.0
    grad = (p - onehot) * selection[:, None] / n_sel
    return value, grad


def _smooth_l1_rows(residual: np.ndarray):
    val, grad = kernels.smooth_l1(residual.reshape(-1))
    return val.reshape(residual.shape), grad.reshape(residual.shape)


def regression_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean over masked anchors of the summed smooth-L1 over components.

    Returns ``(value, grad, per-anchor terms)``; no masked anchors gives zero loss.
    """
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    per_anchor = np.zeros(len(pred))
    grad = np.zeros_like(pred, dtype=np.float64)
    if n == 0:
        return 0.0, grad, per_anchor
    val, g = _smooth_l1_rows(pred[mask] - target[mask])
    per_anchor[mask] = val.sum(axis=1)
    grad[mask] = g / n
    return float(per_anchor[mask].sum() / n), grad, per_anchor


def box_loss(pred, target, positive):
    return regression_loss(np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64), positive)


def pts_loss(pred, target, mask):
    return regression_loss(np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64), mask)


def pose_loss(logits: np.ndarray, target_angles: np.ndarray, mask: np.ndarray, beta: float = POSE_BETA):
    """Binned cross-entropy plus ``beta`` times the squared error of the expected angle.

    ``logits`` is ``(N, 3, 66)``, ``target_angles`` ``(N, 3)`` degrees. Summed over
    the three axes and averaged over masked anchors. Returns ``(value, grad, per-anchor terms)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    grad = np.zeros_like(logits)
    per_anchor = np.zeros(len(logits))
    if n == 0:
        return 0.0, grad, per_anchor
    z = logits[mask]
    a = clamp_angles(np.asarray(target_angles, dtype=np.float64)[mask])
    bins = encode_bins(a)
    lsm = log_softmax(z, axis=-1)
    p = np.exp(lsm)
    ce = -np.take_along_axis(lsm, bins[..., None], axis=-1)[..., 0]
    expected = p @ BIN_CENTERS
    resid = expected - a
    per_axis = ce + beta * resid * resid
    per_anchor[mask] = per_axis.sum(axis=1)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, bins[..., None], 1.0, axis=-1)
    d_expected = p * (BIN_CENTERS - expected[..., None])
    grad[mask] = (p - onehot + 2.0 * beta * resid[..., None] * d_expected) / n
    return float(per_anchor[mask].sum() / n), grad, per_anchor


@dataclass
class TaskLosses:
    cls: float
    box: float
    pts: float
    pose: float
    per_anchor: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def as_array(self) -> np.ndarray:
        return np.array([self.cls, self.box, self.pts, self.pose], dtype=np.float64)


@dataclass
class UMLParams:
    """Log-variances ``s = (ln T1^2, ln s1^2, ln s2^2, ln s3^2)`` for cls, box, pts, pose."""

    s: np.ndarray = field(default_factory=lambda: np.zeros(4))
    log_reg: float = 0.25

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64).reshape(4)
        if not np.all(np.isfinite(self.s)):
            raise ValueError("non-finite UML parameters")

    @property
    def temperature(self) -> float:
        return float(np.exp(self.s[0] / 2))

    @property
    def sigmas(self) -> np.ndarray:
        return np.exp(self.s[1:] / 2)

    def coefficients(self) -> np.ndarray:
        return np.exp(-self.s) * np.array([1.0, 0.5, 0.5, 0.5])

    @classmethod
    def from_weights(cls, weights=HEURISTIC_WEIGHTS, log_reg: float = 0.25) -> "UMLParams":
        """Parameters whose loss coefficients equal ``weights``."""
        w = np.asarray(weights, dtype=np.float64)
        s = -np.log(w / np.array([1.0, 0.5, 0.5, 0.5]))
        return cls(s, log_reg)


def uml_combine(losses, params: UMLParams) -> tuple[float, np.ndarray, np.ndarray]:
    """Uncertainty-weighted total loss.

    ``exp(-s_cls) L_cls + sum_k 0.5 exp(-s_k) L_k + log_reg * sum(s)``.
    Returns ``(L*, dL*/dlosses, dL*/ds)``.
    """
    L = losses.as_array() if isinstance(losses, TaskLosses) else np.asarray(losses, dtype=np.float64)
    coef = params.coefficients()
    total = float(np.dot(coef, L) + params.log_reg * params.s.sum())
    d_s = -coef * L + params.log_reg
    return total, coef.copy(), d_s


def weighted_combine(losses, weights=HEURISTIC_WEIGHTS) -> tuple[float, np.ndarray]:
    """Fixed-weight sum; returns ``(total, dtotal/dlosses)``."""
    L = losses.as_array() if isinstance(losses, TaskLosses) else np.asarray(losses, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    return float(np.dot(w, L)), w.copy()


def uml_stationary_point(losses, log_reg: float = 0.25) -> np.ndarray:
    """Closed-form minimiser over ``s`` for fixed task losses.

    exp(s_k) = c_k L_k / log_reg with c = (1, 0.5, 0.5, 0.5); at the default
    ``log_reg`` that is exp(s_k) = 2 L_k for the regression tasks.
    """
    L = np.asarray(losses, dtype=np.float64)
    return np.log(np.array([1.0, 0.5, 0.5, 0.5]) * L / log_reg)
