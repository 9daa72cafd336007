"""Command-line driver.

Exit codes: 0 success, 1 validation failure, 2 training divergence, 3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3

log = logging.getLogger("mtface")


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


def _load(args):
    from .config import load_config
    return load_config(args.config, args.set or ())


def cmd_anchors(args) -> int:
    from .anchors import generate_anchors
    cfg = _load(args)
    spec = cfg.spec()
    anchors = generate_anchors(spec)
    levels = [
        {"stride": s, "grid": [h, w], "sizes": list(sz), "anchors": h * w * spec.anchors_per_cell}
        for s, (h, w), sz in zip(spec.strides, spec.level_shapes(), spec.anchor_sizes)
    ]
    total = len(anchors.boxes)
    expected = sum(lv["anchors"] for lv in levels)
    if total != expected or total != spec.num_anchors():
        print(f"anchor count mismatch: generated {total}, expected {expected}", file=sys.stderr)
        return EXIT_INVALID
    _emit({"input_size": spec.input_size, "levels": levels, "total": total})
    if args.dump:
        import numpy as np
        np.savetxt(args.dump, anchors.boxes, fmt="%.6f", delimiter=",", header="x1,y1,x2,y2", comments="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import SUITES, TOLERANCE, run_suites
    names = args.suite or list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        print(f"unknown suite(s) {unknown}; available: {sorted(SUITES)}", file=sys.stderr)
        return EXIT_INVALID
    ok = True
    for r in run_suites(args.seeds, names):
        status = "PASS" if r.passed(TOLERANCE) else "FAIL"
        ok &= r.passed(TOLERANCE)
        print(f"{status} {r.name:16s} max_rel_error={r.max_rel_error:.3e} seeds={r.seeds} "
              f"checks={r.checked} time={r.seconds:.2f}s")
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_gen_data(args) -> int:
    from .config import manifest
    from .synthworld import generate_scene, write_scenes
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = [generate_scene(cfg.world, i) for i in range(cfg.data.train_scenes)]
    held = [generate_scene(cfg.world, cfg.data.eval_offset + i, clean=True) for i in range(cfg.data.eval_scenes)]
    write_scenes(out / "train.jsonl", train)
    write_scenes(out / "eval.jsonl", held)
    (out / "manifest.json").write_text(json.dumps(manifest(cfg, "gen-data"), sort_keys=True, indent=2) + "\n")
    _emit({"train": str(out / "train.jsonl"), "eval": str(out / "eval.jsonl"),
           "train_scenes": len(train), "eval_scenes": len(held)})
    return EXIT_OK


def cmd_train(args) -> int:
    from .experiments import run_training
    from .trainer import DivergenceError
    cfg = _load(args)
    out = Path(args.out or cfg.output.dir)
    try:
        res = run_training(cfg, out, resume=args.resume)
    except DivergenceError as e:
        print(f"training diverged: {e}; last good checkpoint in {out / 'last_good.ckpt'}", file=sys.stderr)
        return EXIT_DIVERGED
    _emit({"out": str(out), "eval": res.report.as_record() if res.report else None})
    return EXIT_OK


def cmd_eval(args) -> int:
    from .config import ExperimentConfig
    from .experiments import evaluate
    from .model import ModelState
    model, meta, _ = ModelState.load(args.checkpoint)
    cfg = ExperimentConfig.from_dict(meta.get("manifest", {}).get("config"))
    if args.config or args.set:
        cfg = _load(args)
    report = evaluate(model, cfg).as_record()
    if args.out:
        Path(args.out).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    _emit(report)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiments import format_table, run_ablation
    from .trainer import DivergenceError
    cfg = _load(args)
    seeds = list(range(args.seed0, args.seed0 + args.seeds))
    try:
        rows = run_ablation(cfg, seeds, Path(args.out or cfg.output.dir) / "ablation")
    except DivergenceError as e:
        print(f"ablation run diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    print(format_table(rows), end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    from . import kernels
    from .bench import kernel_benchmark, step_benchmark
    cfg = _load(args)
    _emit({"backend": kernels.BACKEND, "train_step": step_benchmark(cfg, args.steps),
           "kernels": kernel_benchmark(args.repeats)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtface", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", "-c", help="YAML experiment config (defaults when omitted)")
        sp.add_argument("--set", "-s", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value; repeatable")
        return sp

    sp = with_config(sub.add_parser("anchors", help="report anchor counts per level"))
    sp.add_argument("--dump", help="write all anchors as CSV")
    sp.set_defaults(fn=cmd_anchors)

    sp = sub.add_parser("gradcheck", help="run the finite-difference gradient suites")
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("--suite", action="append", help="run only this suite; repeatable")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = with_config(sub.add_parser("gen-data", help="write train / held-out scene files"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_data)

    sp = with_config(sub.add_parser("train", help="train, writing checkpoints and a metrics stream"))
    sp.add_argument("--out", help="output directory (default: output.dir)")
    sp.add_argument("--resume", help="checkpoint to resume from (e.g. OUT/last.ckpt)")
    sp.set_defaults(fn=cmd_train)

    sp = with_config(sub.add_parser("eval", help="evaluate a checkpoint on held-out scenes"))
    sp.add_argument("checkpoint")
    sp.add_argument("--out", help="write the report JSON here")
    sp.set_defaults(fn=cmd_eval)

    sp = with_config(sub.add_parser("ablate", help="baseline -> +MTH -> +UML -> +feedback ladder"))
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--seed0", type=int, default=0)
    sp.add_argument("--out", help="output directory (default: output.dir)")
    sp.set_defaults(fn=cmd_ablate)

    sp = with_config(sub.add_parser("bench", help="per-step and kernel timings"))
    sp.add_argument("--steps", type=int, default=20)
    sp.add_argument("--repeats", type=int, default=200)
    sp.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    from .config import ConfigError
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error [{e.kind}]: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
