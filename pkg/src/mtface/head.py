"""Multi-task head: per-task 1x1 branches, the cross-stitch unit and per-task outputs.

Activations are channel-major ``(C, P)`` matrices where ``P`` runs over pixels
(and over batch entries when several scenes are stacked), so every 1x1
convolution is a single matrix product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Grid
from .pose_codec import N_BINS

TASKS = ("cls", "box", "pts", "pose")
N_TASKS = len(TASKS)
# output components per anchor
TASK_DIMS = {"cls": 2, "box": 4, "pts": 10, "pose": 3 * N_BINS}
STITCH_MODES = ("none", "gated", "full")


class StitchWeights:
    """Mixing weights of the cross-stitch unit.

    ``full``: tensor ``(n_out, n_in, C)``, out_i[k] = sum_j w[i, j, k] x_j[k].
    ``gated``: matrix ``(n, C)``, out_i[k] = w[i, k] x_i[k] + (1 - w[i, k]) mean_{j != i} x_j[k].
    ``none``: no mixing, no parameters.
    """

    def __init__(self, mode: str, w: np.ndarray | None = None, n_tasks: int = N_TASKS, channels: int | None = None):
        if mode not in STITCH_MODES:
            raise ValueError(f"unknown stitch mode {mode!r}; expected one of {STITCH_MODES}")
        self.mode = mode
        if w is None:
            if mode != "none" and channels is None:
                raise ValueError("channels required to build default stitch weights")
            w = self.identity(mode, n_tasks, channels or 0)
        w = np.asarray(w, dtype=np.float64)
        if mode == "full" and (w.ndim != 3 or w.shape[0] != w.shape[1]):
            raise ValueError(f"full stitch weights must be (n, n, C), got {w.shape}")
        if mode == "gated" and w.ndim != 2:
            raise ValueError(f"gated stitch weights must be (n, C), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite stitch weights")
        self.w = w

    @staticmethod
    def identity(mode: str, n_tasks: int, channels: int) -> np.ndarray:
        if mode == "full":
            return np.repeat(np.eye(n_tasks)[:, :, None], channels, axis=2)
        if mode == "gated":
            return np.ones((n_tasks, channels))
        return np.zeros((0,))


def _unwrap(xs):
    is_grid = isinstance(xs[0], Grid)
    arrs = [np.asarray(x.data if isinstance(x, Grid) else x, dtype=np.float64) for x in xs]
    shape = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != shape:
            raise ValueError(f"task grids differ in shape: {shape} vs {a.shape}")
    return np.stack(arrs), is_grid


def _chan(w: np.ndarray, ndim: int) -> np.ndarray:
    # broadcast a trailing channel axis against (C, ...) activations
    return w.reshape(w.shape + (1,) * (ndim - 1))


def stitch_forward(xs, w: StitchWeights):
    """Mix per-task activations. Accepts arrays ``(C, ...)`` or Grids; returns the same kind."""
    x, is_grid = _unwrap(xs)
    out = _stitch(x, w)
    return [Grid(o) for o in out] if is_grid else list(out)


def _stitch(x: np.ndarray, w: StitchWeights) -> np.ndarray:
    n = x.shape[0]
    if w.mode == "none":
        return x.copy()
    if w.w.shape[-1] != x.shape[1] or w.w.shape[0] != n:
        raise ValueError(f"stitch weights {w.w.shape} do not fit activations {x.shape}")
    nd = x.ndim - 1
    if w.mode == "full":
        out = np.empty_like(x)
        for i in range(n):
            acc = _chan(w.w[i, 0], nd) * x[0]
            for j in range(1, n):
                acc = acc + _chan(w.w[i, j], nd) * x[j]
            out[i] = acc
        return out
    out = np.empty_like(x)
    for i in range(n):
        others = _others_mean(x, i)
        g = _chan(w.w[i], nd)
        out[i] = g * x[i] + (1.0 - g) * others
    return out


def _others_mean(x: np.ndarray, i: int) -> np.ndarray:
    idx = [j for j in range(x.shape[0]) if j != i]
    acc = x[idx[0]].copy()
    for j in idx[1:]:
        acc = acc + x[j]
    return acc / len(idx)


def stitch_backward_arrays(dz: np.ndarray, x: np.ndarray, w: StitchWeights):
    """Gradients of the stitch map given upstream ``dz`` and cached input ``x`` (both ``(n, C, ...)``)."""
    n = x.shape[0]
    if w.mode == "none":
        return dz.copy(), np.zeros_like(w.w)
    nd = x.ndim - 1
    red = tuple(range(1, nd))  # pixel axes of a (C, ...) slice
    if w.mode == "full":
        dx = np.zeros_like(x)
        dw = np.zeros_like(w.w)
        for i in range(n):
            for j in range(n):
                dx[j] += _chan(w.w[i, j], nd) * dz[i]
                dw[i, j] = (dz[i] * x[j]).sum(axis=red) if red else dz[i] * x[j]
        return dx, dw
    dx = np.zeros_like(x)
    dw = np.zeros_like(w.w)
    for i in range(n):
        others = _others_mean(x, i)
        g = _chan(w.w[i], nd)
        prod = dz[i] * (x[i] - others)
        dw[i] = prod.sum(axis=red) if red else prod
        dx[i] += g * dz[i]
        spill = (1.0 - g) * dz[i] / (n - 1)
        for j in range(n):
            if j != i:
                dx[j] += spill
    return dx, dw


class StitchUnit:
    """Stateful wrapper caching the forward input for ``backward``."""

    def __init__(self, weights: StitchWeights):
        self.weights = weights
        self._x = None
        self._is_grid = False

    def forward(self, xs):
        x, self._is_grid = _unwrap(xs)
        self._x = x
        out = _stitch(x, self.weights)
        return [Grid(o) for o in out] if self._is_grid else list(out)

    def backward(self, dzs):
        """Return ``(input gradients, weight gradient)`` for upstream gradients ``dzs``."""
        if self._x is None:
            raise RuntimeError("stitch backward called before forward")
        dz, _ = _unwrap(dzs)
        dx, dw = stitch_backward_arrays(dz, self._x, self.weights)
        dxs = [Grid(d) for d in dx] if self._is_grid else list(dx)
        return dxs, dw


def stitch_backward(unit: StitchUnit, dzs):
    return unit.backward(dzs)


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class TaskHeadState:
    """Branch projections, stitch unit and output projections for one pyramid level.

    ``shared_branch=True`` uses a single branch projection for all tasks, which
    with stitch mode ``none`` is the hard-parameter-sharing baseline head.
    """

    def __init__(
        self,
        channels: int,
        anchors_per_cell: int = 2,
        stitch_mode: str = "gated",
        shared_branch: bool = False,
        rng: np.random.Generator | None = None,
        tie_branches: bool = True,
        init_gain: float = 1.0,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.anchors_per_cell = anchors_per_cell
        self.shared_branch = shared_branch
        n_branch = 1 if shared_branch else N_TASKS
        if tie_branches or shared_branch:
            w0 = _uniform(rng, (channels, channels), channels, init_gain)
            self.branch_w = np.repeat(w0[None], n_branch, axis=0)
        else:
            self.branch_w = _uniform(rng, (n_branch, channels, channels), channels, init_gain)
        self.branch_b = np.zeros((n_branch, channels))
        self.stitch = StitchWeights(stitch_mode, n_tasks=N_TASKS, channels=channels)
        self.out_w = {}
        self.out_b = {}
        for t in TASKS:
            d = TASK_DIMS[t] * anchors_per_cell
            self.out_w[t] = _uniform(rng, (d, channels), channels, init_gain)
            self.out_b[t] = np.zeros(d)
        self._cache = None

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        p = {f"{prefix}branch_w": self.branch_w, f"{prefix}branch_b": self.branch_b}
        if self.stitch.mode != "none":
            p[f"{prefix}stitch_w"] = self.stitch.w
        for t in TASKS:
            p[f"{prefix}out_{t}_w"] = self.out_w[t]
            p[f"{prefix}out_{t}_b"] = self.out_b[t]
        return p

    def out_channels(self, task: str) -> int:
        return TASK_DIMS[task] * self.anchors_per_cell

    def forward(self, y: np.ndarray) -> dict[str, np.ndarray]:
        """``y`` is the trunk output ``(C, P)``; returns raw task maps ``(D_t, P)``."""
        if y.shape[0] != self.channels:
            raise ValueError(f"trunk has {y.shape[0]} channels, head expects {self.channels}")
        if self.shared_branch:
            b = self.branch_w[0] @ y + self.branch_b[0][:, None]
            branches = np.stack([b] * N_TASKS)
        else:
            branches = np.stack([self.branch_w[i] @ y + self.branch_b[i][:, None] for i in range(N_TASKS)])
        mixed = _stitch(branches, self.stitch)
        outs = {t: self.out_w[t] @ mixed[i] + self.out_b[t][:, None] for i, t in enumerate(TASKS)}
        self._cache = (y, branches, mixed)
        return outs

    def backward(self, d_outs: dict[str, np.ndarray]) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Return ``(dL/dy, parameter gradients)``; missing tasks count as zero gradient."""
        if self._cache is None:
            raise RuntimeError("head backward called before forward")
        y, branches, mixed = self._cache
        grads: dict[str, np.ndarray] = {}
        d_mixed = np.zeros_like(mixed)
        for i, t in enumerate(TASKS):
            d = d_outs.get(t)
            if d is None:
                grads[f"out_{t}_w"] = np.zeros_like(self.out_w[t])
                grads[f"out_{t}_b"] = np.zeros_like(self.out_b[t])
                continue
            grads[f"out_{t}_w"] = d @ mixed[i].T
            grads[f"out_{t}_b"] = d.sum(axis=1)
            d_mixed[i] = self.out_w[t].T @ d
        d_br, d_stitch = stitch_backward_arrays(d_mixed, branches, self.stitch)
        if self.stitch.mode != "none":
            grads["stitch_w"] = d_stitch
        if self.shared_branch:
            d_b = d_br.sum(axis=0)
            grads["branch_w"] = (d_b @ y.T)[None]
            grads["branch_b"] = d_b.sum(axis=1)[None]
            dy = self.branch_w[0].T @ d_b
        else:
            grads["branch_w"] = np.stack([d_br[i] @ y.T for i in range(N_TASKS)])
            grads["branch_b"] = d_br.sum(axis=2)
            dy = self.branch_w[0].T @ d_br[0]
            for i in range(1, N_TASKS):
                dy = dy + self.branch_w[i].T @ d_br[i]
        return dy, grads


def head_forward(trunk, state: TaskHeadState) -> dict[str, np.ndarray]:
    """Run the head on a trunk Grid (or ``(C, P)`` array); returns raw task maps."""
    if isinstance(trunk, Grid):
        return state.forward(trunk.data.reshape(trunk.channels, -1))
    return state.forward(np.asarray(trunk, dtype=np.float64))


def head_backward(state: TaskHeadState, d_outs):
    return state.backward(d_outs)


def to_anchor_major(raw: np.ndarray, per_anchor: int, anchors_per_cell: int, batch: int) -> np.ndarray:
    """``(A*k, B*HW)`` task map -> ``(B, HW*A, k)`` per-anchor predictions."""
    d, p = raw.shape
    hw = p // batch
    return raw.reshape(anchors_per_cell, per_anchor, batch, hw).transpose(2, 3, 0, 1).reshape(batch, hw * anchors_per_cell, per_anchor)


def from_anchor_major(g: np.ndarray, per_anchor: int, anchors_per_cell: int) -> np.ndarray:
    """Inverse of :func:`to_anchor_major` for gradients."""
    batch, n, k = g.shape
    hw = n // anchors_per_cell
    return g.reshape(batch, hw, anchors_per_cell, k).transpose(2, 3, 0, 1).reshape(anchors_per_cell * k, batch * hw)
