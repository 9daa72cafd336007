"""SGD training loop over synthetic scenes: losses, UML weighting, OHEM and feedback sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .anchors import AnchorSet, MatchResult, PyramidSpec, generate_anchors, match
from .evaluator import EvalReport, evaluate_detections
from .geometry import is_small_face
from .losses import (HEURISTIC_WEIGHTS, POSE_BETA, TaskLosses, box_loss, cls_loss, ohem_select, per_anchor_ce,
                     pose_loss, pts_loss, uml_combine, weighted_combine)
from .model import ModelState, detect, stack_features
from .sampler import FeedbackConfig, FeedbackSet, epoch_feedback, small_box_ratio, stitch_augment
from .synthworld import Scene, WorldConfig, generate_scene, render_features

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Raised on a non-finite loss or parameter; carries the last good training state."""

    def __init__(self, message: str, last_good: "TrainState | None" = None, diagnostic: dict | None = None):
        super().__init__(message)
        self.last_good = last_good
        self.diagnostic = diagnostic or {}


@dataclass
class TrainConfig:
    lr: float = 0.001
    lr_decay_epochs: tuple[int, ...] = (45, 54)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 60
    uml: bool = True
    uml_lr: float | None = None
    uml_log_reg: float = 0.25
    heuristic_weights: tuple[float, ...] = HEURISTIC_WEIGHTS
    feedback: bool = False
    feedback_reweight: bool = True
    cls_mode: str = "ohem"
    ohem_ratio: int = 3
    min_negatives: int = 0  # hardest negatives kept from a scene without positives
    pose_beta: float = POSE_BETA
    seed: int = 0

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        self.heuristic_weights = tuple(float(w) for w in self.heuristic_weights)
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if list(self.lr_decay_epochs) != sorted(self.lr_decay_epochs):
            raise ValueError("lr_decay_epochs must be sorted")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")
        if self.cls_mode not in ("ohem", "strict"):
            raise ValueError("cls_mode must be 'ohem' or 'strict'")
        if len(self.heuristic_weights) != 4:
            raise ValueError("heuristic_weights needs 4 entries")

    def lr_at(self, epoch: int) -> float:
        n = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay_factor ** n


@dataclass
class Sample:
    scene: Scene
    feats: list[np.ndarray]  # per level (C, H, W)
    match: MatchResult


class TrainData:
    """Scenes with their rendered features and anchor matches, computed once."""

    def __init__(self, scenes: Sequence[Scene], spec: PyramidSpec, channels: int):
        self.spec = spec
        self.channels = channels
        self.anchors = generate_anchors(spec)
        self.scenes = list(scenes)
        self.samples = [self.make_sample(s) for s in self.scenes]

    @classmethod
    def from_world(cls, world: WorldConfig, n: int, spec: PyramidSpec, channels: int, start: int = 0,
                   clean: bool = False) -> "TrainData":
        return cls([generate_scene(world, start + i, clean=clean) for i in range(n)], spec, channels)

    def make_sample(self, scene: Scene) -> Sample:
        feats = [g.data for g in render_features(scene, self.spec, self.channels)]
        return Sample(scene, feats, match(self.anchors, scene.faces))

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class StepOutput:
    losses: TaskLosses
    total: float
    grads: dict[str, np.ndarray]
    face_box_losses: np.ndarray
    face_small: np.ndarray


def compute_loss(model: ModelState, batch: Sequence[Sample], cfg: TrainConfig, small_side: float = 25.0,
                 need_grads: bool = True) -> StepOutput:
    """Forward the batch, mine negatives, evaluate the four losses and combine them."""
    feats = [np.stack([s.feats[l] for s in batch], axis=1) for l in range(len(batch[0].feats))]
    pred = model.forward(feats)
    B, N = pred.cls.shape[:2]
    labels = np.concatenate([s.match.labels for s in batch])
    pos = labels == 1
    cls_logits = pred.cls.reshape(B * N, 2)

    ce = per_anchor_ce(cls_logits, labels)
    sel = np.zeros(B * N, dtype=bool)
    for b, s in enumerate(batch):
        sl = slice(b * N, (b + 1) * N)
        if cfg.cls_mode == "ohem":
            sel[sl] = ohem_select(ce[sl], s.match.labels, cfg.ohem_ratio, cfg.min_negatives)
        else:
            sel[sl] = s.match.labels == 1
    if not sel.any():
        # a batch without any positive: classify its hardest negatives so the loss is defined
        for b, s in enumerate(batch):
            sl = slice(b * N, (b + 1) * N)
            sel[sl] = ohem_select(ce[sl], s.match.labels, cfg.ohem_ratio, max(cfg.min_negatives, 3))
    l_cls, g_cls = cls_loss(cls_logits, labels, sel)

    box_t = np.concatenate([s.match.box_targets for s in batch])
    l_box, g_box, box_terms = box_loss(pred.box.reshape(B * N, 4), box_t, pos)
    lm_mask = pos & np.concatenate([s.match.landmark_valid for s in batch])
    lm_t = np.concatenate([s.match.landmark_targets for s in batch])
    l_pts, g_pts, pts_terms = pts_loss(pred.pts.reshape(B * N, 10), lm_t, lm_mask)
    pose_mask = pos & np.concatenate([s.match.pose_valid for s in batch])
    pose_t = np.concatenate([s.match.pose_targets for s in batch])
    l_pose, g_pose, pose_terms = pose_loss(pred.pose.reshape(B * N, 3, -1), pose_t, pose_mask, cfg.pose_beta)

    losses = TaskLosses(l_cls, l_box, l_pts, l_pose,
                        {"cls": ce * sel, "box": box_terms, "pts": pts_terms, "pose": pose_terms})
    if cfg.uml:
        total, coef, d_s = uml_combine(losses, model.uml)
    else:
        total, coef = weighted_combine(losses, cfg.heuristic_weights)
        d_s = np.zeros(4)

    # box loss attributed to faces, for the stitching trigger
    face_loss, face_small = [], []
    for b, s in enumerate(batch):
        gi = s.match.gt_index
        terms = box_terms[b * N:(b + 1) * N]
        for fi, f in enumerate(s.scene.faces):
            face_loss.append(float(terms[gi == fi].sum()))
            face_small.append(is_small_face(f.box, small_side))

    grads = {}
    if need_grads:
        d = {
            "cls": (coef[0] * g_cls).reshape(B, N, 2),
            "box": (coef[1] * g_box).reshape(B, N, 4),
            "pts": (coef[2] * g_pts).reshape(B, N, 10),
            "pose": (coef[3] * g_pose).reshape(B, N, 3 * g_pose.shape[-1]),
        }
        grads = model.backward(d)
        grads["uml_s"] = d_s
    return StepOutput(losses, total, grads, np.array(face_loss), np.array(face_small, dtype=bool))


def sgd_update(model: ModelState, grads: dict[str, np.ndarray], cfg: TrainConfig, lr: float) -> None:
    """v <- mu v - lr (g + wd theta); theta <- theta + v. No decay on the UML parameters."""
    params = model.parameters()
    for name, p in params.items():
        if name == "uml_s":
            if not cfg.uml:
                continue
            g = grads[name]
            step_lr = lr if cfg.uml_lr is None else cfg.uml_lr * lr / cfg.lr  # follows the schedule
        else:
            g = grads[name] + cfg.weight_decay * p
            step_lr = lr
        v = model.momentum[name]
        v *= cfg.momentum
        v -= step_lr * g
        p += v


def train_step(batch: Sequence[Sample], model: ModelState, cfg: TrainConfig, lr: float | None = None,
               small_side: float = 25.0) -> StepOutput:
    lr = cfg.lr if lr is None else lr
    out = compute_loss(model, batch, cfg, small_side)
    if not math.isfinite(out.total):
        raise DivergenceError(f"non-finite loss {out.total}",
                              diagnostic={"losses": out.losses.as_array().tolist()})
    sgd_update(model, out.grads, cfg, lr)
    return out


@dataclass
class TrainState:
    model: ModelState
    fset: FeedbackSet
    epoch: int = 0
    step: int = 0
    pending_stitch: bool = False

    def copy(self) -> "TrainState":
        return TrainState(self.model.copy(), FeedbackSet(self.fset.weights.copy(), self.fset.epoch),
                          self.epoch, self.step, self.pending_stitch)

    def extra_tensors(self) -> dict[str, np.ndarray]:
        return {"feedback_weights": self.fset.weights,
                "counters": np.array([self.epoch, self.step, int(self.pending_stitch), self.fset.epoch], dtype=np.int64)}

    @classmethod
    def from_checkpoint(cls, path) -> tuple["TrainState", dict]:
        model, meta, extra = ModelState.load(path)
        c = extra.get("counters", np.zeros(4, dtype=np.int64))
        fw = extra.get("feedback_weights")
        fset = FeedbackSet(fw, int(c[3])) if fw is not None else None
        return cls(model, fset, int(c[0]), int(c[1]), bool(c[2])), meta


def _round(x: float) -> float:
    return float(x)


def train(data: TrainData, cfg: TrainConfig, model: ModelState | None = None,
          fb_cfg: FeedbackConfig | None = None, state: TrainState | None = None,
          sink: Callable[[dict], None] | None = None,
          epoch_end: Callable[[TrainState], None] | None = None) -> tuple[ModelState, list[dict]]:
    """Run the epoch loop; returns the final model and the metric records emitted.

    Resuming: pass ``state`` from a checkpoint; the loop continues at ``state.epoch``.
    All randomness derives from ``(cfg.seed, epoch)``, so a resumed run matches
    an uninterrupted one.
    """
    fb_cfg = fb_cfg or FeedbackConfig()
    if state is None:
        if model is None:
            raise ValueError("need a model or a training state")
        state = TrainState(model, FeedbackSet.uniform(len(data)))
    if state.fset is None:
        state.fset = FeedbackSet.uniform(len(data))
    model = state.model
    model.uml.log_reg = cfg.uml_log_reg
    history: list[dict] = []

    def emit(rec):
        history.append(rec)
        if sink is not None:
            sink(rec)

    n = len(data)
    steps = math.ceil(n / cfg.batch_size) if n else 0
    last_good = state.copy()
    while state.epoch < cfg.epochs:
        epoch = state.epoch
        lr = cfg.lr_at(epoch)
        order = state.fset.draw_epoch(np.random.default_rng([cfg.seed, epoch, 1]), n)
        stitch_rng = np.random.default_rng([cfg.seed, epoch, 2])
        for s in range(steps):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            stitched = state.pending_stitch
            if stitched:
                p = state.fset.weights / state.fset.weights.sum()
                batch = []
                for _ in range(len(idx)):
                    pick = stitch_rng.choice(n, size=4, p=p)
                    mosaic = stitch_augment([data.scenes[i] for i in pick], fb_cfg.annotation_floor)
                    batch.append(data.make_sample(mosaic))
            else:
                batch = [data.samples[i] for i in idx]
            try:
                out = train_step(batch, model, cfg, lr, fb_cfg.small_side)
            except DivergenceError as e:
                e.last_good = last_good
                e.diagnostic.update({"epoch": epoch, "step": state.step})
                raise
            if not all(np.all(np.isfinite(v)) for v in model.parameters().values()):
                raise DivergenceError("non-finite parameters after update", last_good,
                                      {"epoch": epoch, "step": state.step})
            if not (np.all(np.isfinite(model.uml.coefficients())) and np.all(np.isfinite(model.uml.sigmas))
                    and np.all(model.uml.coefficients() > 0)):
                raise DivergenceError("learned task weights left the representable range", last_good,
                                      {"epoch": epoch, "step": state.step, "uml_s": model.uml.s.tolist()})
            ratio = small_box_ratio(out.face_box_losses, out.face_small)
            trigger = bool(cfg.feedback and ratio is not None and ratio < fb_cfg.ratio_threshold)
            state.pending_stitch = trigger
            L = out.losses
            emit({
                "kind": "step", "epoch": epoch, "step": state.step, "lr": lr,
                "loss": _round(out.total), "cls": L.cls, "box": L.box, "pts": L.pts, "pose": L.pose,
                "T1": model.uml.temperature, "sigma_box": float(model.uml.sigmas[0]),
                "sigma_pts": float(model.uml.sigmas[1]), "sigma_pose": float(model.uml.sigmas[2]),
                "stitched": stitched, "small_ratio": ratio, "trigger": trigger,
            })
            state.step += 1
        if cfg.feedback and cfg.feedback_reweight and n:
            state.fset = epoch_feedback(_detector(model, data, fb_cfg), data.scenes, state.fset, fb_cfg)
        else:
            state.fset = FeedbackSet(state.fset.weights, state.fset.epoch + 1)
        state.epoch += 1
        rec = {"kind": "epoch", "epoch": epoch, "lr": lr, "steps": state.step}
        if cfg.feedback:
            rec["feedback"] = state.fset.as_record()
        emit(rec)
        last_good = state.copy()
        if epoch_end is not None:
            epoch_end(state)
    return model, history


def _detector(model: ModelState, data: TrainData, fb_cfg: FeedbackConfig, chunk: int = 64):
    def run(indices):
        out = []
        for start in range(0, len(indices), chunk):
            part = [data.samples[i] for i in indices[start:start + chunk]]
            feats = [np.stack([s.feats[l] for s in part], axis=1) for l in range(len(part[0].feats))]
            dets = detect(model, feats, data.anchors, fb_cfg.score_threshold, fb_cfg.nms_iou)
            out.extend(d.boxes for d in dets)
        return out
    return run


def predict(model: ModelState, data: TrainData, min_score: float = 0.02, nms_iou: float = 0.4,
            top_k: int = 100, chunk: int = 64):
    out = []
    for start in range(0, len(data), chunk):
        part = data.samples[start:start + chunk]
        feats = [np.stack([s.feats[l] for s in part], axis=1) for l in range(len(part[0].feats))]
        out.extend(detect(model, feats, data.anchors, min_score, nms_iou, top_k))
    return out


def evaluate_model(model: ModelState, data: TrainData, min_score: float = 0.02, nms_iou: float = 0.4,
                   report_score: float = 0.5, splits=None) -> EvalReport:
    dets = predict(model, data, min_score, nms_iou)
    return evaluate_detections(data.scenes, dets, 0.5, report_score, splits)
