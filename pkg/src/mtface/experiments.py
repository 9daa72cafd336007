"""Run recipes shared by the CLI and the acceptance tests: training runs with artifacts, ablation ladder."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, manifest
from .evaluator import EvalReport
from .model import ModelState
from .synthworld import BASE_CHANNELS
from .trainer import DivergenceError, TrainData, TrainState, evaluate_model, train

log = logging.getLogger(__name__)

LADDER = ("baseline", "+MTH", "+UML", "+feedback")


def _json_line(rec: dict) -> str:
    return json.dumps(_json_safe(rec), sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def _json_safe(v):
    """Non-finite floats become strings ("nan", "inf") so diagnostics stay strict JSON."""
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    return v


def train_data(cfg: ExperimentConfig) -> TrainData:
    return TrainData.from_world(cfg.world, cfg.data.train_scenes, cfg.spec(), cfg.model.in_channels)


def eval_data(cfg: ExperimentConfig) -> TrainData:
    """Held-out scenes from the same world, labels without noise."""
    return TrainData.from_world(cfg.world, cfg.data.eval_scenes, cfg.spec(), cfg.model.in_channels,
                                start=cfg.data.eval_offset, clean=True)


def evaluate(model: ModelState, cfg: ExperimentConfig, data: TrainData | None = None) -> EvalReport:
    data = data or eval_data(cfg)
    e = cfg.eval
    return evaluate_model(model, data, e.min_score, e.nms_iou, e.report_score)


@dataclass
class RunResult:
    model: ModelState
    history: list[dict]
    report: EvalReport | None


def run_training(cfg: ExperimentConfig, out_dir: str | Path | None = None, resume: str | Path | None = None,
                 do_eval: bool = True, command: str = "train") -> RunResult:
    """Train per ``cfg``; with ``out_dir``, write manifest, metrics stream, checkpoints and eval report.

    Files: ``manifest.json``, ``metrics.jsonl`` (one record per step, epoch and
    eval), ``last.ckpt`` (after every epoch), ``final.ckpt``, ``eval.json``.
    On divergence ``last_good.ckpt`` is written and the error re-raised.
    """
    if cfg.model.in_channels < BASE_CHANNELS:
        raise ValueError(f"model.in_channels must be >= {BASE_CHANNELS}")
    out = Path(out_dir) if out_dir is not None else None
    data = train_data(cfg)
    state = None
    if resume is not None:
        state, _ = TrainState.from_checkpoint(resume)
    model = state.model if state is not None else ModelState(cfg.spec(), cfg.model)
    man = manifest(cfg, command)
    meta = {"manifest": man}

    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(man, sort_keys=True, indent=2) + "\n")
        fh = open(out / "metrics.jsonl", "a" if resume is not None else "w", encoding="utf-8")

    def sink(rec):
        if fh is not None:
            fh.write(_json_line(rec))

    def epoch_end(st: TrainState):
        if out is not None:
            st.model.save(out / "last.ckpt", meta, st.extra_tensors())
            fh.flush()

    try:
        model, history = train(data, cfg.train, model=model, fb_cfg=cfg.feedback, state=state, sink=sink,
                               epoch_end=epoch_end)
    except DivergenceError as e:
        if out is not None and e.last_good is not None:
            e.last_good.model.save(out / "last_good.ckpt", meta, e.last_good.extra_tensors())
            sink({"kind": "divergence", "message": str(e), **{k: v for k, v in e.diagnostic.items()
                                                                 if isinstance(v, (int, float, str, list))}})
        if fh is not None:
            fh.close()
        raise
    report = None
    if do_eval:
        report = evaluate(model, cfg)
        rec = {"kind": "eval", **report.as_record()}
        history.append(rec)
        sink(rec)
    if out is not None:
        model.save(out / "final.ckpt", meta)
        if report is not None:
            (out / "eval.json").write_text(json.dumps(report.as_record(), sort_keys=True, indent=2) + "\n")
        fh.close()
    return RunResult(model, history, report)


def ladder_configs(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """Baseline (hard-shared head, fixed weights) -> +MTH -> +UML -> +feedback."""
    mode = cfg.model.stitch_mode if cfg.model.stitch_mode != "none" else "gated"
    rows = []
    for name in LADDER:
        c = copy.deepcopy(cfg)
        c.model.stitch_mode = "none" if name == "baseline" else mode
        c.model.shared_branch = name == "baseline"
        c.train.uml = name in ("+UML", "+feedback")
        c.train.feedback = name == "+feedback"
        rows.append((name, c))
    return rows


def _mean_std(values):
    v = np.array([np.nan if x is None else x for x in values], dtype=np.float64)
    v = v[np.isfinite(v)]
    if len(v) == 0:
        return None, None
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def run_ablation(cfg: ExperimentConfig, seeds, out_dir: str | Path | None = None) -> list[dict]:
    """Run every ladder row for every seed; returns one summary row per configuration."""
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for name, c in ladder_configs(cfg):
        reports = []
        for s in seeds:
            cs = c.with_seed(s)
            sub = None if out is None else out / f"{LADDER.index(name)}_{name.strip('+').lower()}" / f"seed{s}"
            reports.append(run_training(cs, sub, command="ablate").report.as_record())
        row = {"config": name, "seeds": list(seeds)}
        for key in ("ap", "ap_small", "ap_medium", "nme", "mae_mean"):
            m, sd = _mean_std([r[key] for r in reports])
            row[key] = m
            row[f"{key}_std"] = sd
        row["per_seed"] = reports
        rows.append(row)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n")
        (out / "ablation.md").write_text(format_table(rows))
    return rows


def _fmt(v, digits=4):
    return "n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.{digits}f}"


def format_table(rows: list[dict]) -> str:
    head = "| config | AP | AP small | AP medium | NME | pose MAE (deg) |\n|---|---|---|---|---|---|\n"
    body = "".join(
        f"| {r['config']} | {_fmt(r['ap'])} ± {_fmt(r['ap_std'])} | {_fmt(r['ap_small'])} | {_fmt(r['ap_medium'])} "
        f"| {_fmt(r['nme'])} | {_fmt(r['mae_mean'], 2)} |\n"
        for r in rows)
    return head + body
