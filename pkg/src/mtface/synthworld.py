"""Deterministic synthetic scenes and the feature pyramid a backbone would emit for them.

A scene is a list of faces, each with a latent geometry (true centre, side,
pose) used for rendering and an annotation (box, landmarks, pose) used as the
training target. Label noise perturbs only the annotation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anchors import PyramidSpec
from .geometry import Box, Face, LandmarkSet
from .numerics import Grid

# canonical 3-d landmark template in face units (x right, y down, z toward camera)
TEMPLATE = np.array([
    [-0.20, -0.12, 0.00],  # left eye
    [0.20, -0.12, 0.00],  # right eye
    [0.00, 0.06, 0.22],  # nose tip
    [-0.15, 0.22, 0.00],  # left mouth corner
    [0.15, 0.22, 0.00],  # right mouth corner
])

N_SCALE_TUNING = 6
N_POSE_TUNING = 13  # per axis
POSE_TUNING_CENTERS = np.linspace(-90.0, 90.0, N_POSE_TUNING)
BASE_CHANNELS = 11 + N_SCALE_TUNING + 3 * N_POSE_TUNING
BUMP_WIDTH = 0.5  # Gaussian sigma in units of face side / stride
LEVEL_AFFINITY_CENTER = 2.0  # preferred face side / stride ratio
LEVEL_AFFINITY_OCTAVES = 1.25
OWNERSHIP_RADIUS = 0.7  # ownership mask radius in units of face side / stride
OWNERSHIP_OCTAVES = 1.1  # half-width of the level ownership window, in octaves of side / stride
OWNERSHIP_OCTAVE_SHIFT = -0.15  # window centre relative to the preferred ratio
_MIX_SEED = 20240611


@dataclass(frozen=True)
class SceneFace(Face):
    """Annotated face plus its latent ``(cx, cy, side, yaw, pitch, roll)``."""

    latent: tuple[float, ...] = ()


@dataclass
class Scene:
    canvas: int
    faces: list[SceneFace]
    seed: int = 0
    index: int = 0

    @property
    def boxes(self) -> np.ndarray:
        if not self.faces:
            return np.zeros((0, 4))
        return np.stack([f.box.as_array() for f in self.faces])


@dataclass
class SizeBand:
    lo: float
    hi: float
    weight: float


@dataclass
class WorldConfig:
    canvas: int = 64
    size_bands: list[SizeBand] = field(default_factory=lambda: [
        SizeBand(10.0, 24.0, 0.35), SizeBand(28.0, 48.0, 0.65)])
    faces_min: int = 1
    faces_max: int = 3
    yaw_range: float = 60.0
    pitch_range: float = 30.0
    roll_range: float = 30.0
    box_noise: float = 0.0  # std as a fraction of face side
    landmark_noise: float = 0.0  # std as a fraction of face side
    pose_noise: float = 0.0  # std in degrees
    pose_floor: float = 35.0  # faces with a smaller side carry no pose label
    min_gap: float = 1.5  # Chebyshev centre distance / mean side, lower bound
    max_tries: int = 50
    seed: int = 0

    def __post_init__(self):
        self.size_bands = [b if isinstance(b, SizeBand) else SizeBand(*b) if isinstance(b, (list, tuple)) else SizeBand(**b)
                           for b in self.size_bands]
        if self.canvas <= 0:
            raise ValueError("canvas must be positive")
        if not self.size_bands:
            raise ValueError("at least one size band required")
        for b in self.size_bands:
            if not (0 < b.lo <= b.hi <= self.canvas) or b.weight < 0:
                raise ValueError(f"invalid size band {b}")
        if sum(b.weight for b in self.size_bands) <= 0:
            raise ValueError("size band weights sum to zero")
        if not (0 <= self.faces_min <= self.faces_max):
            raise ValueError("need 0 <= faces_min <= faces_max")
        for name in ("box_noise", "landmark_noise", "pose_noise", "yaw_range", "pitch_range", "roll_range"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if max(self.yaw_range, self.pitch_range, self.roll_range) > 90:
            raise ValueError("pose ranges must stay within 90 degrees")


def project_landmarks(cx: float, cy: float, side: float, yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Rotate the template by a small-angle rotation and project orthographically.

    The rotation is ``p + w x p`` with ``w = (sin pitch, sin yaw, sin roll)``;
    only the image-plane part is kept.
    """
    sp, sy, sr = (math.sin(math.radians(a)) for a in (pitch, yaw, roll))
    x, y, z = TEMPLATE[:, 0], TEMPLATE[:, 1], TEMPLATE[:, 2]
    px = x + sy * z - sr * y
    py = y + sr * x - sp * z
    return np.stack([cx + side * px, cy + side * py], axis=1)


def _clip_box(x1, y1, x2, y2, canvas, min_side=1.0):
    x1, x2 = max(0.0, x1), min(float(canvas), x2)
    y1, y2 = max(0.0, y1), min(float(canvas), y2)
    if x2 - x1 < min_side:
        x2 = x1 + min_side
    if y2 - y1 < min_side:
        y2 = y1 + min_side
    return Box(x1, y1, x2, y2)


def make_face(latent, rng: np.random.Generator | None, cfg: WorldConfig, canvas: int) -> SceneFace:
    cx, cy, side, yaw, pitch, roll = latent
    lm = project_landmarks(cx, cy, side, yaw, pitch, roll)
    box = Box.from_center(cx, cy, side, side)
    pose = (yaw, pitch, roll)
    if rng is not None and (cfg.box_noise > 0 or cfg.landmark_noise > 0 or cfg.pose_noise > 0):
        nb = rng.normal(0.0, cfg.box_noise * side, size=4)
        box = _clip_box(box.x1 + nb[0], box.y1 + nb[1], box.x2 + nb[2], box.y2 + nb[3], canvas)
        lm = lm + rng.normal(0.0, cfg.landmark_noise * side, size=lm.shape)
        lm[:, 0] = np.clip(lm[:, 0], box.x1, box.x2)
        lm[:, 1] = np.clip(lm[:, 1], box.y1, box.y2)
        pose = tuple(float(a) for a in np.asarray(pose) + rng.normal(0.0, cfg.pose_noise, size=3))
    return SceneFace(box, LandmarkSet.from_array(lm), tuple(float(p) for p in pose), True,
                     side >= cfg.pose_floor, tuple(float(v) for v in latent))


def generate_scene(cfg: WorldConfig, index: int, clean: bool = False) -> Scene:
    """Scene ``index`` of the world; ``clean`` drops label noise (same geometry)."""
    rng = np.random.default_rng([cfg.seed, index])
    n_faces = int(rng.integers(cfg.faces_min, cfg.faces_max + 1))
    weights = np.array([b.weight for b in cfg.size_bands], dtype=np.float64)
    weights = weights / weights.sum()
    placed: list[tuple] = []
    for _ in range(n_faces):
        for _attempt in range(cfg.max_tries):
            band = cfg.size_bands[int(rng.choice(len(cfg.size_bands), p=weights))]
            side = float(rng.uniform(band.lo, band.hi))
            half = side / 2
            cx = float(rng.uniform(half, cfg.canvas - half))
            cy = float(rng.uniform(half, cfg.canvas - half))
            ok = all(max(abs(cx - q[0]), abs(cy - q[1])) >= cfg.min_gap * (side + q[2]) / 2 for q in placed)
            if ok:
                yaw = float(rng.uniform(-cfg.yaw_range, cfg.yaw_range))
                pitch = float(rng.uniform(-cfg.pitch_range, cfg.pitch_range))
                roll = float(rng.uniform(-cfg.roll_range, cfg.roll_range))
                placed.append((cx, cy, side, yaw, pitch, roll))
                break
    noise_rng = None if clean else np.random.default_rng([cfg.seed, index, 1])
    faces = [make_face(lat, noise_rng, cfg, cfg.canvas) for lat in placed]
    return Scene(cfg.canvas, faces, cfg.seed, index)


def _mixing_matrix(channels: int) -> np.ndarray:
    rng = np.random.default_rng(_MIX_SEED)
    extra = channels - BASE_CHANNELS
    return rng.normal(0.0, 1.0 / math.sqrt(BASE_CHANNELS), size=(extra, BASE_CHANNELS))


def _plateau(x: float | np.ndarray, radius: float) -> np.ndarray:
    """Flat-topped window: about 1 for |x| < 0.8 radius, about 0 beyond 1.3 radius."""
    return np.exp(-(np.asarray(x) / radius) ** 8)


def _face_profile(latent, stride: int, h: int, w: int) -> np.ndarray:
    """Base channels deposited by one face on one level, ``(BASE_CHANNELS, h, w)``.

    Objectness channels are a Gaussian bump ``g`` scaled by how well the face
    size suits the level. Attribute channels are gated by a flat-topped
    ownership mask instead, so that near the face centre they carry the raw
    offset, scale and pose values a linear read-out can decode.
    """
    cx, cy, side, yaw, pitch, roll = latent
    rho = side / stride
    sigma = BUMP_WIDTH * rho
    ux, uy = cx / stride - 0.5, cy / stride - 0.5
    dx = ux - np.arange(w)[None, :]
    dy = uy - np.arange(h)[:, None]
    octave = math.log2(rho / LEVEL_AFFINITY_CENTER)
    affinity = math.exp(-octave ** 2 / (2 * LEVEL_AFFINITY_OCTAVES ** 2))
    g = affinity * np.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))
    own = _plateau(octave - OWNERSHIP_OCTAVE_SHIFT, OWNERSHIP_OCTAVES) * _plateau(
        np.sqrt(dx * dx + dy * dy), OWNERSHIP_RADIUS * rho)
    ls = math.log2(side)
    centers = np.linspace(2.5, 6.0, N_SCALE_TUNING)
    tau = centers[1] - centers[0]
    tuning = np.exp(-(ls - centers) ** 2 / (2 * tau * tau))
    sy, sp, sr = (math.sin(math.radians(a)) for a in (yaw, pitch, roll))
    out = np.empty((BASE_CHANNELS, h, w))
    out[0] = g
    for c, k in enumerate(tuning, start=1):
        out[c] = g * k
    ptau = POSE_TUNING_CENTERS[1] - POSE_TUNING_CENTERS[0]
    pose_codes = [math.exp(-(a - c) ** 2 / (2 * ptau * ptau)) for a in (yaw, pitch, roll) for c in POSE_TUNING_CENTERS]
    attrs = [dx, dy, math.log(rho), rho, rho * sy, rho * sp, rho * sr, yaw / 90.0, pitch / 90.0, roll / 90.0,
             *pose_codes]
    for c, k in enumerate(attrs, start=1 + N_SCALE_TUNING):
        out[c] = own * k
    return out


def render_features(scene: Scene, spec: PyramidSpec, channels: int = BASE_CHANNELS) -> list[Grid]:
    """Per-level feature Grids, summed over the faces of the scene.

    Channel layout: objectness bump, scale-tuning curves times the bump, then
    owned attributes (cell-to-centre offset x/y, log and linear relative
    scale, scale times pose sines, pose angles / 90, per-axis pose tuning
    curves). ``channels`` above the
    base count append fixed random mixtures of the base channels.
    """
    if scene.canvas != spec.input_size:
        raise ValueError(f"scene canvas {scene.canvas} != pyramid input {spec.input_size}")
    if channels < BASE_CHANNELS:
        raise ValueError(f"need at least {BASE_CHANNELS} feature channels")
    mix = _mixing_matrix(channels) if channels > BASE_CHANNELS else None
    grids = []
    for stride, (h, w) in zip(spec.strides, spec.level_shapes()):
        base = np.zeros((BASE_CHANNELS, h, w))
        for f in scene.faces:
            base += _face_profile(f.latent, stride, h, w)
        if mix is not None:
            base = np.concatenate([base, np.tensordot(mix, base, axes=(1, 0))])
        grids.append(Grid(base))
    return grids


# -- serialization ---------------------------------------------------------

def scene_to_record(scene: Scene) -> dict:
    return {
        "scene": scene.index,
        "seed": scene.seed,
        "canvas": scene.canvas,
        "n_faces": len(scene.faces),
        "faces": [
            {
                "box": [f.box.x1, f.box.y1, f.box.x2, f.box.y2],
                "landmarks": [list(p) for p in f.landmarks.points],
                "pose": list(f.pose),
                "landmark_valid": f.landmark_valid,
                "pose_valid": f.pose_valid,
                "latent": list(f.latent),
            }
            for f in scene.faces
        ],
    }


def scene_from_record(rec: dict) -> Scene:
    faces = [
        SceneFace(Box(*f["box"]), LandmarkSet(tuple(tuple(p) for p in f["landmarks"])), tuple(f["pose"]),
                  bool(f["landmark_valid"]), bool(f["pose_valid"]), tuple(f["latent"]))
        for f in rec["faces"]
    ]
    if rec.get("n_faces", len(faces)) != len(faces):
        raise ValueError(f"scene {rec.get('scene')}: n_faces does not match face list")
    return Scene(int(rec["canvas"]), faces, int(rec.get("seed", 0)), int(rec.get("scene", 0)))


def write_scenes(path, scenes) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(json.dumps(scene_to_record(s), separators=(",", ":")) + "\n")


def read_scenes(path) -> list[Scene]:
    out = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(scene_from_record(json.loads(line)))
        except (KeyError, ValueError, TypeError) as e:
            raise ValueError(f"{path}:{ln}: bad scene record: {e}") from e
    return out
