"""Full detector: shared trunk projection plus one multi-task head per pyramid level."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .anchors import AnchorSet, PyramidSpec, decode_boxes, decode_landmarks_array
from .checkpoint import load_tensors, save_tensors
from .head import TASK_DIMS, TASKS, TaskHeadState, _uniform, from_anchor_major, to_anchor_major
from .losses import UMLParams
from .numerics import Grid, softmax
from .pose_codec import N_BINS, decode_expected
from .synthworld import BASE_CHANNELS


@dataclass
class ModelConfig:
    in_channels: int = BASE_CHANNELS
    channels: int = 48
    stitch_mode: str = "gated"
    shared_branch: bool = False
    tie_branches: bool = True
    trunk_relu: bool = False
    init_gain: float = math.sqrt(3.0)  # uniform(+-sqrt(3 / fan_in)): unit variance per fan-in
    seed: int = 0


@dataclass
class Predictions:
    cls: np.ndarray  # (B, N, 2)
    box: np.ndarray  # (B, N, 4)
    pts: np.ndarray  # (B, N, 10)
    pose: np.ndarray  # (B, N, 3, 66)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"cls": self.cls, "box": self.box, "pts": self.pts, "pose": self.pose}


class ModelState:
    """Trunk weights, per-level heads, UML parameters and SGD momentum buffers."""

    def __init__(self, spec: PyramidSpec, cfg: ModelConfig | None = None):
        cfg = cfg or ModelConfig()
        self.spec = spec
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 7])
        self.trunk_w = _uniform(rng, (cfg.channels, cfg.in_channels), cfg.in_channels, cfg.init_gain)
        self.trunk_b = np.zeros(cfg.channels)
        self.heads = [
            TaskHeadState(cfg.channels, spec.anchors_per_cell, cfg.stitch_mode, cfg.shared_branch,
                          rng=rng, tie_branches=cfg.tie_branches, init_gain=cfg.init_gain)
            for _ in spec.strides
        ]
        self.uml = UMLParams()
        self.momentum = {k: np.zeros_like(v) for k, v in self.parameters().items()}
        self._cache = None

    # -- parameters ----------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        """Name -> array, by reference; in-place edits change the model."""
        p = {"trunk_w": self.trunk_w, "trunk_b": self.trunk_b}
        for li, h in enumerate(self.heads):
            p.update(h.parameters(prefix=f"l{li}."))
        p["uml_s"] = self.uml.s
        return p

    def flat_parameters(self, names=None) -> np.ndarray:
        params = self.parameters()
        names = names or list(params)
        return np.concatenate([params[n].reshape(-1) for n in names])

    def set_flat_parameters(self, flat: np.ndarray, names=None) -> None:
        params = self.parameters()
        names = names or list(params)
        pos = 0
        for n in names:
            a = params[n]
            a[...] = flat[pos:pos + a.size].reshape(a.shape)
            pos += a.size

    def copy(self) -> "ModelState":
        other = ModelState.__new__(ModelState)
        other.spec = self.spec
        other.cfg = self.cfg
        other.trunk_w = self.trunk_w.copy()
        other.trunk_b = self.trunk_b.copy()
        other.heads = []
        for h in self.heads:
            nh = TaskHeadState.__new__(TaskHeadState)
            nh.__dict__.update(h.__dict__)
            nh.branch_w = h.branch_w.copy()
            nh.branch_b = h.branch_b.copy()
            nh.stitch = type(h.stitch)(h.stitch.mode, h.stitch.w.copy()) if h.stitch.mode != "none" else h.stitch
            nh.out_w = {k: v.copy() for k, v in h.out_w.items()}
            nh.out_b = {k: v.copy() for k, v in h.out_b.items()}
            nh._cache = None
            other.heads.append(nh)
        other.uml = UMLParams(self.uml.s.copy(), self.uml.log_reg)
        other.momentum = {k: v.copy() for k, v in self.momentum.items()}
        other._cache = None
        return other

    # -- forward / backward ----------------------------------------------------

    def forward(self, feats: list[np.ndarray]) -> Predictions:
        """``feats[l]`` is ``(C_in, B, H, W)``; returns per-anchor predictions for the batch."""
        if len(feats) != len(self.heads):
            raise ValueError(f"expected {len(self.heads)} levels, got {len(feats)}")
        A = self.spec.anchors_per_cell
        batch = feats[0].shape[1]
        outs = {t: [] for t in TASKS}
        cache = []
        for f, head in zip(feats, self.heads):
            x = f.reshape(f.shape[0], -1)
            pre = self.trunk_w @ x + self.trunk_b[:, None]
            y = np.maximum(pre, 0.0) if self.cfg.trunk_relu else pre
            raw = head.forward(y)
            for t in TASKS:
                outs[t].append(to_anchor_major(raw[t], TASK_DIMS[t], A, batch))
            cache.append((x, pre))
        self._cache = (cache, batch)
        pose = np.concatenate(outs["pose"], axis=1)
        return Predictions(
            np.concatenate(outs["cls"], axis=1),
            np.concatenate(outs["box"], axis=1),
            np.concatenate(outs["pts"], axis=1),
            pose.reshape(pose.shape[0], pose.shape[1], 3, N_BINS),
        )

    def backward(self, d: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Parameter gradients from per-anchor prediction gradients (same shapes as forward)."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        cache, batch = self._cache
        A = self.spec.anchors_per_cell
        grads = {"trunk_w": np.zeros_like(self.trunk_w), "trunk_b": np.zeros_like(self.trunk_b)}
        start = 0
        for li, (head, (x, pre)) in enumerate(zip(self.heads, cache)):
            n_level = pre.shape[1] // batch * A
            sl = slice(start, start + n_level)
            start += n_level
            d_raw = {}
            for t in TASKS:
                g = d.get(t)
                if g is None:
                    continue
                g = g.reshape(batch, -1, TASK_DIMS[t])[:, sl]
                d_raw[t] = from_anchor_major(g, TASK_DIMS[t], A)
            dy, hg = head.backward(d_raw)
            for k, v in hg.items():
                grads[f"l{li}.{k}"] = v
            dpre = dy * (pre > 0) if self.cfg.trunk_relu else dy
            grads["trunk_w"] += dpre @ x.T
            grads["trunk_b"] += dpre.sum(axis=1)
        grads["uml_s"] = np.zeros(4)
        return grads

    # -- persistence -----------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        t = {f"param.{k}": v for k, v in self.parameters().items()}
        t.update({f"momentum.{k}": v for k, v in self.momentum.items()})
        return t

    def save(self, path, meta: dict | None = None, extra: dict[str, np.ndarray] | None = None) -> None:
        meta = dict(meta or {})
        meta["model"] = {**self.cfg.__dict__}
        meta["pyramid"] = {"input_size": self.spec.input_size, "strides": list(self.spec.strides),
                           "anchor_sizes": [list(a) for a in self.spec.anchor_sizes]}
        meta["uml_log_reg"] = self.uml.log_reg
        tensors = self.state_tensors()
        if extra:
            tensors.update({f"extra.{k}": v for k, v in extra.items()})
        save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path) -> tuple["ModelState", dict, dict[str, np.ndarray]]:
        tensors, meta = load_tensors(path)
        p = meta["pyramid"]
        spec = PyramidSpec(p["input_size"], tuple(p["strides"]), tuple(tuple(a) for a in p["anchor_sizes"]))
        model = cls(spec, ModelConfig(**meta["model"]))
        model.uml.log_reg = meta.get("uml_log_reg", 0.25)
        for k, v in model.parameters().items():
            v[...] = tensors[f"param.{k}"]
        for k, v in model.momentum.items():
            v[...] = tensors[f"momentum.{k}"]
        extra = {k[len("extra."):]: v for k, v in tensors.items() if k.startswith("extra.")}
        return model, meta, extra


def stack_features(per_scene: list[list[Grid]]) -> list[np.ndarray]:
    """List over scenes of per-level Grids -> per-level ``(C, B, H, W)`` arrays."""
    n_levels = len(per_scene[0])
    return [np.stack([s[l].data for s in per_scene], axis=1) for l in range(n_levels)]


@dataclass
class Detections:
    boxes: np.ndarray  # (K, 4)
    scores: np.ndarray  # (K,)
    landmarks: np.ndarray  # (K, 5, 2)
    poses: np.ndarray  # (K, 3) degrees
    anchor_index: np.ndarray  # (K,)


def detect(model: ModelState, feats: list[np.ndarray], anchors: AnchorSet, min_score: float = 0.05,
           nms_iou: float = 0.4, top_k: int = 100) -> list[Detections]:
    """Score threshold, top-k and greedy NMS per scene of a feature batch."""
    pred = model.forward(feats)
    out = []
    for b in range(pred.cls.shape[0]):
        scores = softmax(pred.cls[b], axis=-1)[:, 1]
        cand = np.flatnonzero(scores >= min_score)
        cand = cand[np.argsort(-scores[cand], kind="stable")][:top_k]
        boxes = decode_boxes(anchors.boxes[cand], pred.box[b, cand])
        keep = cand[kernels.nms(boxes, scores[cand], nms_iou)] if len(cand) else cand
        boxes = decode_boxes(anchors.boxes[keep], pred.box[b, keep])
        lms = decode_landmarks_array(anchors.boxes[keep], pred.pts[b, keep])
        poses = decode_expected(pred.pose[b, keep], axis=-1) if len(keep) else np.zeros((0, 3))
        out.append(Detections(boxes, scores[keep], lms.reshape(-1, 5, 2), np.asarray(poses).reshape(-1, 3), keep))
    return out
