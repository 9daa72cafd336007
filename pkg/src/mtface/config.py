"""Experiment configuration: YAML schema, validation with line numbers, dotted overrides."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from . import __version__
from .anchors import PyramidSpec
from .model import ModelConfig
from .sampler import FeedbackConfig
from .synthworld import WorldConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration. ``kind`` is one of parse, unknown_key, invalid_value, missing_file."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass
class DataConfig:
    train_scenes: int = 1024
    eval_scenes: int = 200
    eval_offset: int = 1_000_000  # scene indices of the held-out split start here

    def __post_init__(self):
        if self.train_scenes < 1 or self.eval_scenes < 1 or self.eval_offset < self.train_scenes:
            raise ValueError("need train_scenes >= 1, eval_scenes >= 1, eval_offset >= train_scenes")


@dataclass
class EvalConfig:
    min_score: float = 0.02
    nms_iou: float = 0.4
    report_score: float = 0.5

    def __post_init__(self):
        for name in ("min_score", "nms_iou", "report_score"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class OutputConfig:
    dir: str = "runs/default"


@dataclass
class PyramidConfig:
    input_size: int = 64
    strides: tuple[int, ...] = (8, 16, 32)
    anchor_sizes: tuple[tuple[float, float], ...] | None = ((12, 18), (24, 34), (48, 64))

    def __post_init__(self):
        self.strides = tuple(self.strides)
        if self.anchor_sizes is not None:
            self.anchor_sizes = tuple(tuple(a) for a in self.anchor_sizes)

    def build(self) -> PyramidSpec:
        sizes = None if self.anchor_sizes is None else tuple(tuple(float(v) for v in a) for a in self.anchor_sizes)
        return PyramidSpec(int(self.input_size), tuple(int(s) for s in self.strides), sizes)


SECTIONS = {
    "world": WorldConfig,
    "pyramid": PyramidConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "feedback": FeedbackConfig,
    "data": DataConfig,
    "eval": EvalConfig,
    "output": OutputConfig,
}


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    feedback: FeedbackConfig = field(default_factory=FeedbackConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def spec(self) -> PyramidSpec:
        return self.pyramid.build()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with world, model and training seeds all set to ``seed``."""
        c = copy.deepcopy(self)
        c.world.seed = c.model.seed = c.train.seed = int(seed)
        return c

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, raw: dict | None, marks: dict | None = None) -> "ExperimentConfig":
        return _build(raw or {}, marks or {})


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``1e-3``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"""),
    list("-+0123456789"),
)


def _load_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


def _check_types(klass, body: dict, marks: dict, section: str) -> None:
    """Reject scalars of the wrong kind before they reach the dataclass."""
    defaults = {f.name: f.default for f in dataclasses.fields(klass)}
    for key, value in body.items():
        d = defaults.get(key)
        path = f"{section}.{key}"
        if isinstance(d, bool):
            ok = isinstance(value, bool)
            want = "true or false"
        elif isinstance(d, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
            want = "an integer"
        elif isinstance(d, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            want = "a number"
        elif isinstance(d, str):
            ok = isinstance(value, str)
            want = "a string"
        else:
            continue
        if not ok:
            raise ConfigError("invalid_value", f"'{path}'{_where(marks, path)}: expected {want}, got {value!r}")


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _where(marks: dict, path: str) -> str:
    line = marks.get(path)
    return f" (line {line})" if line else ""


def _build(raw: dict, marks: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("invalid_value", "top level of the config must be a mapping")
    sections = {}
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError("unknown_key", f"unknown section '{key}'{_where(marks, key)}; "
                                             f"expected one of {sorted(SECTIONS)}")
    for name, klass in SECTIONS.items():
        body = raw.get(name) or {}
        if not isinstance(body, dict):
            raise ConfigError("invalid_value", f"section '{name}' must be a mapping{_where(marks, name)}")
        known = {f.name for f in dataclasses.fields(klass)}
        for key in body:
            if key not in known:
                path = f"{name}.{key}"
                raise ConfigError("unknown_key", f"unknown key '{path}'{_where(marks, path)}; "
                                                 f"valid keys: {sorted(known)}")
        _check_types(klass, body, marks, name)
        try:
            sections[name] = klass(**body)
        except (TypeError, ValueError) as e:
            msg = str(e)
            # point at the field the message names, else at the section
            key = next((k for k in body if msg.startswith(k) or f"{k} " in msg or f"'{k}'" in msg), None)
            path = f"{name}.{key}" if key else name
            raise ConfigError("invalid_value", f"'{path}'{_where(marks, path)}: {msg}") from e
    cfg = ExperimentConfig(**sections)
    try:
        cfg.spec()
    except ValueError as e:
        raise ConfigError("invalid_value", f"section 'pyramid'{_where(marks, 'pyramid')}: {e}") from e
    if cfg.world.canvas != cfg.pyramid.input_size:
        raise ConfigError("invalid_value", f"world.canvas {cfg.world.canvas} != pyramid.input_size "
                                           f"{cfg.pyramid.input_size}{_where(marks, 'world.canvas')}")
    return cfg


def _marks(text: str) -> dict[str, int]:
    """Dotted key path -> 1-based line number, for the first two mapping levels."""
    out = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out
    if not isinstance(root, yaml.MappingNode):
        return out
    for k, v in root.value:
        out[k.value] = k.start_mark.line + 1
        if isinstance(v, yaml.MappingNode):
            for k2, _ in v.value:
                out[f"{k.value}.{k2.value}"] = k2.start_mark.line + 1
    return out


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError("invalid_value", f"override '{item}' is not of the form section.key=value")
    key, value = item.split("=", 1)
    path = key.strip().split(".")
    if len(path) != 2 or not all(path):
        raise ConfigError("invalid_value", f"override key '{key}' must be section.key")
    try:
        parsed = _load_yaml(value) if value.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError("parse", f"override '{item}': cannot parse value: {e}") from e
    return path, parsed


def apply_overrides(raw: dict, overrides) -> dict:
    raw = copy.deepcopy(raw or {})
    for item in overrides or ():
        (section, key), value = parse_override(item)
        if section not in SECTIONS:
            raise ConfigError("unknown_key", f"override '{item}': unknown section '{section}'")
        raw.setdefault(section, {})
        if raw[section] is None:
            raw[section] = {}
        raw[section][key] = value
    return raw


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Load a YAML config (or defaults when ``path`` is None) and apply ``section.key=value`` overrides."""
    raw, marks = {}, {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError("missing_file", f"config file not found: {path}")
        text = p.read_text(encoding="utf-8")
        try:
            raw = _load_yaml(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError("parse", f"{path}: YAML error: {e}") from e
        marks = _marks(text)
    return ExperimentConfig.from_dict(apply_overrides(raw, overrides), marks)


def code_version() -> str:
    """Package version plus a digest of the Python sources and kernel source."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for f in sorted(list(root.glob("*.py")) + list(root.glob("*.pyx"))):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def manifest(cfg: ExperimentConfig, command: str, extra: dict | None = None) -> dict:
    from . import kernels
    return {
        "command": command,
        "config": cfg.to_dict(),
        "seeds": {"world": cfg.world.seed, "model": cfg.model.seed, "train": cfg.train.seed},
        "code_version": code_version(),
        "kernel_backend": kernels.BACKEND,
        **(extra or {}),
    }


def dump_yaml(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
