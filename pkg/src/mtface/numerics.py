"""Dense grids, differentiable primitives and the finite-difference oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels


@dataclass
class Grid:
    """Feature map stored channel-major as a ``(channels, height, width)`` array."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"Grid needs a 3-d array, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("Grid contains non-finite values")

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> "Grid":
        return cls(np.zeros((channels, height, width)))

    @classmethod
    def from_flat(cls, flat, channels: int, height: int, width: int) -> "Grid":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != channels * height * width:
            raise ValueError(
                f"flat length {flat.size} != {channels}*{height}*{width}"
            )
        return cls(flat.reshape(channels, height, width))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def __add__(self, other: "Grid") -> "Grid":
        return Grid(self.data + other.data)


def smooth_l1(x):
    """Huber-style loss with unit transition: 0.5 x^2 inside |x| < 1, |x| - 0.5 outside.

    Works elementwise on arrays; scalars come back as floats.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("smooth_l1 got non-finite input")
    val, _ = kernels.smooth_l1(arr.reshape(-1))
    val = val.reshape(arr.shape)
    return float(val) if val.ndim == 0 else val


def smooth_l1_grad(x):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("smooth_l1_grad got non-finite input")
    _, grad = kernels.smooth_l1(arr.reshape(-1))
    grad = grad.reshape(arr.shape)
    return float(grad) if grad.ndim == 0 else grad


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[axis] == 0:
        raise ValueError("log_softmax of an empty vector")
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float
    n_checked: int = 0

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error < tol


class NonFiniteEvaluation(FloatingPointError):
    def __init__(self, index: int, value: float):
        super().__init__(f"objective is non-finite ({value}) when perturbing index {index}")
        self.index = index
        self.value = value


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    theta,
    analytic_grad,
    indices: Sequence[int] | None = None,
) -> GradCheckReport:
    """Compare ``analytic_grad`` with central differences of ``f`` around ``theta``.

    Step per coordinate is ``1e-5 * max(1, |theta_i|)``. ``indices`` restricts the
    check to a subset of flat coordinates (all by default). ``f`` receives a copy
    of the perturbed vector, so it may keep a reference.
    """
    theta = np.array(theta, dtype=np.float64).reshape(-1)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64).reshape(-1)
    if analytic_grad.shape != theta.shape:
        raise ValueError(f"gradient shape {analytic_grad.shape} != parameter shape {theta.shape}")
    idx = range(theta.size) if indices is None else indices

    worst, worst_i, worst_a, worst_n = 0.0, -1, 0.0, 0.0
    count = 0
    for i in idx:
        i = int(i)
        h = 1e-5 * max(1.0, abs(theta[i]))
        plus = theta.copy()
        plus[i] += h
        minus = theta.copy()
        minus[i] -= h
        fp = float(f(plus))
        if not np.isfinite(fp):
            raise NonFiniteEvaluation(i, fp)
        fm = float(f(minus))
        if not np.isfinite(fm):
            raise NonFiniteEvaluation(i, fm)
        # representable step, not the nominal 2h
        num = (fp - fm) / (plus[i] - minus[i])
        err = rel_error(analytic_grad[i], num)
        count += 1
        if err > worst or worst_i < 0:
            worst, worst_i, worst_a, worst_n = err, i, float(analytic_grad[i]), num
    return GradCheckReport(worst, worst_i, worst_a, worst_n, count)
