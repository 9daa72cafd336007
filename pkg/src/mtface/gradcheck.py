"""Finite-difference suites for every hand-written backward pass.

Each suite builds a random, well-scaled instance per seed and compares the
analytic gradient with central differences. Used by the ``gradcheck`` CLI
command and the test-suite.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .anchors import PyramidSpec
from .head import StitchWeights, TaskHeadState, TASKS, stitch_backward_arrays, stitch_forward
from .losses import (UMLParams, TaskLosses, box_loss, cls_loss, ohem_select, per_anchor_ce, pose_loss, pts_loss,
                     uml_combine)
from .model import ModelConfig, ModelState
from .numerics import GradCheckReport, finite_diff_check
from .pose_codec import N_BINS

TOLERANCE = 1e-5
TOY_SPEC = PyramidSpec(64, (8, 16, 32), ((12, 18), (24, 34), (48, 64)))


@dataclass
class SuiteResult:
    name: str
    seeds: int
    max_rel_error: float
    worst_seed: int
    checked: int
    seconds: float

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.max_rel_error < tol

    def as_record(self) -> dict:
        return {"suite": self.name, "seeds": self.seeds, "max_rel_error": self.max_rel_error,
                "worst_seed": self.worst_seed, "checked": self.checked, "seconds": round(self.seconds, 3)}


def _worst(reports: Iterable[GradCheckReport]) -> tuple[float, int]:
    worst, n = 0.0, 0
    for r in reports:
        worst = max(worst, r.max_rel_error)
        n += r.n_checked
    return worst, n


def _check_blocks(f, blocks: list[np.ndarray], grads: list[np.ndarray], setter, rng, per_block: int | None):
    """Check a list of parameter blocks, each against its own analytic gradient."""
    reports = []
    for bi, (theta, g) in enumerate(zip(blocks, grads)):
        def fb(v, bi=bi):
            setter(bi, v)
            return f()
        idx = None
        if per_block is not None and theta.size > per_block:
            idx = np.sort(rng.choice(theta.size, size=per_block, replace=False))
        base = theta.reshape(-1).copy()
        reports.append(finite_diff_check(fb, base, g, idx))
        setter(bi, base)
    return reports


def _check_directions(f, blocks: list[np.ndarray], grads: list[np.ndarray], rng, n_dirs: int):
    """Directional checks: for each block, ``t -> f(theta + t u)`` at ``t = 0`` against ``g . u``.

    Every coordinate of the block moves at once, so an exactly cancelling
    gradient component (sign terms of smooth-L1 summing to zero) cannot
    reduce the check to comparing roundoff noise against zero.
    """
    reports = []
    for theta, g in zip(blocks, grads):
        base = theta.copy()
        for _ in range(n_dirs):
            u = rng.normal(size=theta.shape)
            u /= np.linalg.norm(u)

            def ft(t, u=u):
                theta[...] = base + t[0] * u
                return f()

            reports.append(finite_diff_check(ft, np.zeros(1), np.array([np.sum(g * u)])))
        theta[...] = base
    return reports


# -- suites ------------------------------------------------------------------

def stitch_case(seed: int, mode: str) -> list[GradCheckReport]:
    rng = np.random.default_rng([seed, 11])
    n, C, P = 4, 3, 5
    x = rng.normal(size=(n, C, P))
    w = StitchWeights(mode, StitchWeights.identity(mode, n, C) + 0.3 * rng.normal(
        size=StitchWeights.identity(mode, n, C).shape))
    R = rng.normal(size=(n, C, P))
    arrays = [x, w.w]

    def f():
        return float(np.sum(R * stitch_forward(x, w)))

    def setter(bi, v):
        arrays[bi][...] = np.asarray(v).reshape(arrays[bi].shape)

    dx, dw = stitch_backward_arrays(R, x, w)
    return _check_blocks(f, arrays, [dx, dw], setter, rng, None)


def head_case(seed: int, mode: str = "gated", shared: bool = False) -> list[GradCheckReport]:
    rng = np.random.default_rng([seed, 12])
    C, P = 4, 6
    head = TaskHeadState(C, 2, mode, shared, rng=rng, tie_branches=False)
    if mode != "none":
        head.stitch.w += 0.2 * rng.normal(size=head.stitch.w.shape)
    for k, v in head.parameters().items():
        if k.endswith("_b"):
            v[...] = 0.1 * rng.normal(size=v.shape)
    y = rng.normal(size=(C, P))
    R = {t: rng.normal(size=(head.out_channels(t), P)) for t in TASKS}

    def f():
        outs = head.forward(y)
        return float(sum(np.sum(R[t] * outs[t]) for t in TASKS))

    head.forward(y)
    dy, grads = head.backward(R)
    params = head.parameters()
    names = list(params)
    arrays = [y] + [params[k] for k in names]

    def setter(bi, v):
        arrays[bi][...] = np.asarray(v).reshape(arrays[bi].shape)

    return _check_blocks(f, arrays, [dy] + [grads[k] for k in names], setter, rng, 40)


def loss_case(seed: int, task: str) -> list[GradCheckReport]:
    rng = np.random.default_rng([seed, 13])
    N = 24
    if task == "cls":
        logits = rng.normal(size=(N, 2))
        labels = rng.choice([1, 0, 0, -1], size=N)
        labels[0] = 1
        sel = ohem_select(per_anchor_ce(logits, labels), labels)

        def f(v):
            return cls_loss(v.reshape(N, 2), labels, sel)[0]

        return [finite_diff_check(f, logits.reshape(-1), cls_loss(logits, labels, sel)[1])]
    if task == "pose":
        # the cross-entropy and expected-angle terms can cancel on single bins, so
        # check along random directions through all logits instead of per coordinate
        logits = rng.normal(scale=0.5, size=(N, 3, N_BINS))
        target = rng.uniform(-90, 90, size=(N, 3))
        mask = rng.random(N) < 0.6
        g = pose_loss(logits, target, mask)[1]
        return _check_directions(lambda: pose_loss(logits, target, mask)[0], [logits], [g], rng, 10)
    d = 4 if task == "box" else 10
    fn = box_loss if task == "box" else pts_loss
    pred = rng.normal(size=(N, d))
    # keep residuals away from the smooth-L1 kink at |r| = 1
    r = rng.uniform(0.05, 0.9, size=(N, d)) * rng.choice([-1, 1], size=(N, d))
    r[::3] *= 3.0
    target = pred - r
    mask = rng.random(N) < 0.6

    def f(v):
        return fn(v.reshape(N, d), target, mask)[0]

    return [finite_diff_check(f, pred.reshape(-1), fn(pred, target, mask)[1])]


def uml_case(seed: int) -> list[GradCheckReport]:
    rng = np.random.default_rng([seed, 14])
    s = rng.normal(scale=0.7, size=4)
    L = rng.uniform(0.1, 5.0, size=4)

    def f_s(v):
        return uml_combine(TaskLosses(*L), UMLParams(v))[0]

    def f_l(v):
        return uml_combine(TaskLosses(*v), UMLParams(s))[0]

    _, d_l, d_s = uml_combine(TaskLosses(*L), UMLParams(s))
    return [finite_diff_check(f_s, s, d_s), finite_diff_check(f_l, L, d_l)]


def composed_case(seed: int, stitch_mode: str = "gated", uml: bool = True, n_dirs: int = 3) -> list[GradCheckReport]:
    """Full loss of a small 64-input model over a two-scene batch, w.r.t. every parameter tensor."""
    from .synthworld import BASE_CHANNELS, WorldConfig
    from .trainer import TrainConfig, TrainData, compute_loss

    rng = np.random.default_rng([seed, 15])
    world = WorldConfig(seed=seed, faces_min=1, faces_max=3, box_noise=0.02, landmark_noise=0.02)
    data = TrainData.from_world(world, 2, TOY_SPEC, BASE_CHANNELS)
    model = ModelState(TOY_SPEC, ModelConfig(channels=5, stitch_mode=stitch_mode, tie_branches=False,
                                             trunk_relu=True, seed=seed))
    for k, v in model.parameters().items():
        if k == "uml_s":
            v[...] = rng.normal(scale=0.5, size=v.shape)
        elif k.endswith("_b"):
            v[...] = 0.2 * rng.normal(size=v.shape)
        elif k.endswith("stitch_w"):
            v += 0.2 * rng.normal(size=v.shape)
    cfg = TrainConfig(uml=uml)
    batch = data.samples
    out = compute_loss(model, batch, cfg)
    params = model.parameters()

    def f():
        return compute_loss(model, batch, cfg, need_grads=False).total

    names = list(params)
    return _check_directions(f, [params[k] for k in names], [out.grads[k] for k in names], rng, n_dirs)


SUITES: dict[str, Callable[[int], list[GradCheckReport]]] = {
    "stitch_gated": lambda s: stitch_case(s, "gated"),
    "stitch_full": lambda s: stitch_case(s, "full"),
    "head_gated": lambda s: head_case(s, "gated"),
    "head_full": lambda s: head_case(s, "full"),
    "head_shared": lambda s: head_case(s, "none", shared=True),
    "loss_cls": lambda s: loss_case(s, "cls"),
    "loss_box": lambda s: loss_case(s, "box"),
    "loss_pts": lambda s: loss_case(s, "pts"),
    "loss_pose": lambda s: loss_case(s, "pose"),
    "uml": uml_case,
    "composed_gated": lambda s: composed_case(s, "gated"),
    "composed_full": lambda s: composed_case(s, "full", uml=False),
}


def run_suites(seeds: int = 20, names: Iterable[str] | None = None) -> list[SuiteResult]:
    results = []
    for name in names or SUITES:
        t0 = time.perf_counter()
        worst, worst_seed, checked = 0.0, -1, 0
        for seed in range(seeds):
            err, n = _worst(SUITES[name](seed))
            checked += n
            if err > worst or worst_seed < 0:
                worst, worst_seed = err, seed
        results.append(SuiteResult(name, seeds, worst, worst_seed, checked, time.perf_counter() - t0))
    return results
