"""Wall-clock timing: training steps and the compiled kernels against their numpy fallback."""

from __future__ import annotations

import time

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _best_of(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _random_boxes(rng, n, canvas=64.0):
    xy = rng.uniform(0, canvas * 0.8, size=(n, 2))
    wh = rng.uniform(4, canvas * 0.3, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def kernel_cases(seed: int = 0):
    """Workloads shaped like the detector's: 168-anchor matching, evaluation NMS, AP matching."""
    rng = np.random.default_rng(seed)
    anchors, gts = _random_boxes(rng, 168), _random_boxes(rng, 3)
    dets, scores = _random_boxes(rng, 100), rng.random(100)
    ignore = rng.random(3) < 0.3
    resid = rng.normal(scale=2.0, size=2000)
    return {
        "iou_matrix(168x3)": lambda k: k.iou_matrix(anchors, gts),
        "nms(100)": lambda k: k.nms(dets, scores, 0.4),
        "greedy_match(100x3)": lambda k: k.greedy_match(dets, gts, ignore, 0.5),
        "smooth_l1(2000)": lambda k: k.smooth_l1(resid),
    }


def kernel_benchmark(repeats: int = 200, seed: int = 0) -> list[dict]:
    """Best-of-``repeats`` seconds per call for each kernel and backend."""
    rows = []
    for name, case in kernel_cases(seed).items():
        row = {"kernel": name, "python_s": _best_of(lambda: case(_pykernels), repeats)}
        if _ckernels is not None:
            row["cython_s"] = _best_of(lambda: case(_ckernels), repeats)
            row["speedup"] = row["python_s"] / row["cython_s"]
        rows.append(row)
    return rows


def step_benchmark(cfg, steps: int = 20) -> dict:
    """Mean seconds per training step for the configured model and batch size."""
    from .model import ModelState
    from .trainer import TrainData, train_step

    n = cfg.train.batch_size
    data = TrainData.from_world(cfg.world, n, cfg.spec(), cfg.model.in_channels)
    model = ModelState(cfg.spec(), cfg.model)
    train_step(data.samples, model, cfg.train)  # warm-up
    t0 = time.perf_counter()
    for _ in range(steps):
        train_step(data.samples, model, cfg.train)
    per_step = (time.perf_counter() - t0) / steps
    return {"batch_size": n, "steps": steps, "seconds_per_step": per_step, "scenes_per_second": n / per_step}
