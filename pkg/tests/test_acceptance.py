"""Acceptance criteria, one test each, at their stated tolerances and budgets.

Each test records a one-line PASS/FAIL summary (printed in the terminal
summary section) before asserting. The training experiments take most of
the runtime: roughly 25 minutes on one CPU core.
"""

import time
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from conftest import ACCEPTANCE_LINES
from mtface.anchors import PyramidSpec, generate_anchors
from mtface.cli import main as cli_main
from mtface.config import load_config
from mtface.experiments import LADDER, ladder_configs, run_ablation, run_training
from mtface.gradcheck import SUITES, TOLERANCE, run_suites
from mtface.head import TASKS
from mtface.losses import HEURISTIC_WEIGHTS, UMLParams, ohem_select, pose_loss, uml_combine, uml_stationary_point
from mtface.model import ModelConfig, ModelState
from mtface.pose_codec import N_BINS, BIN_CENTERS, decode_expected, encode_bin
from mtface.synthworld import BASE_CHANNELS, WorldConfig
from mtface.trainer import TrainConfig, TrainData, compute_loss

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SEEDS = [0, 1, 2, 3, 4]

# Trainability floor. Pilot run of configs/default.yaml with feedback on
# (1024 scenes, 60 epochs) gave AP 1.000, NME 0.003, mean pose MAE 2.24 deg in about 5 minutes;
# the floors below are the stated thresholds, comfortably above the pilot.
TRAIN_AP_FLOOR = 0.95
TRAIN_NME_CEIL = 0.05
TRAIN_MAE_CEIL = 5.0


def record(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def test_anchor_fidelity():
    t0 = time.perf_counter()
    n640 = len(generate_anchors(PyramidSpec(640, (8, 16, 32))).boxes)
    n64 = len(generate_anchors(PyramidSpec(64, (8, 16, 32))).boxes)
    dt = time.perf_counter() - t0
    ok = n640 == 16800 and n64 == 168 and dt < 1.0
    record("anchor fidelity", ok, f"640 -> {n640}, 64 -> {n64}, {dt:.3f}s")
    assert ok


def test_gradient_oracle():
    t0 = time.perf_counter()
    results = run_suites(20)
    dt = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = len(results) == len(SUITES) and all(r.passed(TOLERANCE) for r in results) and dt < 120
    record("gradient oracle", ok, f"{len(results)} suites x 20 seeds, worst {worst.name} "
                                  f"{worst.max_rel_error:.2e} < {TOLERANCE:g}, {dt:.1f}s")
    assert ok, [r.as_record() for r in results if not r.passed(TOLERANCE)]


def _batch(seed, n=4):
    world = WorldConfig(seed=seed, box_noise=0.03, landmark_noise=0.03)
    return TrainData.from_world(world, n, load_config().spec(), BASE_CHANNELS).samples


def test_uml_equivalence():
    worst = 0.0
    spec = load_config().spec()
    for seed in range(5):
        batch = _batch(seed)
        a = ModelState(spec, ModelConfig(channels=8, seed=seed))
        b = ModelState(spec, ModelConfig(channels=8, seed=seed))
        a.uml = UMLParams.from_weights(HEURISTIC_WEIGHTS)
        ga = compute_loss(a, batch, TrainConfig(uml=True))
        gb = compute_loss(b, batch, TrainConfig(uml=False))
        for k in gb.grads:
            if k != "uml_s":
                worst = max(worst, float(np.max(np.abs(ga.grads[k] - gb.grads[k]))))
        # the totals differ only by the parameter-only log term
        worst = max(worst, abs(ga.total - 0.25 * a.uml.s.sum() - gb.total))
    ok = worst <= 1e-12
    record("UML equivalence", ok, f"max |grad difference| {worst:.1e} <= 1e-12 (weights 2:1:1:0.25, 5 batches)")
    assert ok


def test_baseline_equivalence():
    spec = load_config().spec()
    rng = np.random.default_rng(0)
    worst = 0.0
    for seed in range(5):
        mth = ModelState(spec, ModelConfig(channels=12, seed=seed, stitch_mode="full", tie_branches=True))
        base = ModelState(spec, ModelConfig(channels=12, seed=seed, stitch_mode="none", shared_branch=True))
        for k, v in base.parameters().items():
            if k.endswith("_b") and "branch" not in k:
                v[...] = rng.normal(size=v.shape)
                mth.parameters()[k][...] = v
        feats = [rng.normal(size=(BASE_CHANNELS, 3, h, w)) for h, w in spec.level_shapes()]
        pa, pb = mth.forward(feats).as_dict(), base.forward(feats).as_dict()
        worst = max(worst, max(float(np.max(np.abs(pa[t] - pb[t]))) for t in TASKS))
    ok = worst <= 1e-12
    record("baseline equivalence", ok, f"identity full stitch + tied branches vs shared head: max diff {worst:.1e}")
    assert ok


def test_uml_stationary_point():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        L = rng.uniform(0.01, 20.0, size=4)
        s_star = uml_stationary_point(L)
        assert np.allclose(np.exp(s_star[1:]), 2 * L[1:], rtol=1e-12)
        for k in range(1, 4):
            def f(v, k=k):
                s = s_star.copy()
                s[k] = v
                return uml_combine(L, UMLParams(s))[0]
            res = minimize_scalar(f, bracket=(s_star[k] - 2, s_star[k] + 2), method="brent", tol=1e-12)
            worst = max(worst, abs(res.x - s_star[k]))
    ok = worst < 1e-6
    record("UML stationary point", ok, f"|s_numeric - ln(2 L)| max {worst:.1e} < 1e-6 over 50 loss draws")
    assert ok


@pytest.mark.slow
def test_sigma_ordering():
    cfg = load_config(CONFIGS / "sigma_noise.yaml")
    t0 = time.perf_counter()
    pairs = []
    for s in SEEDS:
        res = run_training(cfg.with_seed(s), None, do_eval=False)
        sig = res.model.uml.sigmas
        pairs.append((float(sig[0]), float(sig[1])))
    dt = time.perf_counter() - t0
    wins = sum(p > b for b, p in pairs)
    ok = wins >= 4 and dt <= 600
    detail = ", ".join(f"{b:.2f}<{p:.2f}" if p > b else f"{b:.2f}>={p:.2f}" for b, p in pairs)
    record("sigma ordering", ok, f"sigma_box vs sigma_pts per seed [{detail}]; {wins}/5 ordered, {dt:.0f}s")
    assert ok


def test_pose_codec():
    worst = 0.0
    for theta in range(-99, 99):
        z = np.zeros(N_BINS)
        z[encode_bin(theta)] = 1000.0
        worst = max(worst, abs(decode_expected(z) - theta))
    zero = True
    for b in range(N_BINS):
        logits = np.full((1, 3, N_BINS), -1000.0)
        logits[..., b] = 1000.0
        val = pose_loss(logits, np.full((1, 3), BIN_CENTERS[b]), np.ones(1, dtype=bool))[0]
        zero &= val == 0.0
    ok = worst <= 1.5 and zero
    record("pose codec", ok, f"round-trip max error {worst:.3f} deg <= 1.5 over [-99, 98]; "
                             f"L_pose exactly 0 at all 66 bin centres: {zero}")
    assert ok


def test_ohem():
    rng = np.random.default_rng(0)
    bad = 0
    for _ in range(500):
        n = int(rng.integers(1, 300))
        labels = rng.choice([1, 0, 0, 0, 0, -1], size=n)
        ce = np.round(rng.exponential(size=n), 1)
        sel = ohem_select(ce, labels)
        n_pos, negs = int((labels == 1).sum()), [i for i in range(n) if labels[i] == 0]
        k = min(3 * n_pos, len(negs))
        oracle = sorted(negs, key=lambda i: (-ce[i], i))[:k]
        picked = sorted(np.flatnonzero(sel & (labels == 0)).tolist())
        bad += picked != sorted(oracle) or not np.all(sel[labels == 1])
    ok = bad == 0
    record("OHEM", ok, f"500 random instances vs brute-force sort: {bad} mismatches")
    assert ok


@pytest.mark.slow
def test_feedback_efficacy():
    base = load_config(CONFIGS / "feedback_scarce.yaml")
    t0 = time.perf_counter()
    small = {}
    for flag in (False, True):
        vals = []
        for s in SEEDS:
            c = base.with_seed(s)
            c.train.feedback = flag
            vals.append(run_training(c, None).report.ap_small)
        small[flag] = np.array(vals, dtype=np.float64)
    dt = time.perf_counter() - t0
    gain = small[True].mean() - small[False].mean()
    spread = max(small[True].std(ddof=1), small[False].std(ddof=1))
    ok = gain > spread and dt <= 1200
    record("feedback efficacy", ok,
           f"small-face AP off {small[False].mean():.3f}±{small[False].std(ddof=1):.3f}, "
           f"on {small[True].mean():.3f}±{small[True].std(ddof=1):.3f}; gain {gain:.3f} > "
           f"max std {spread:.3f}; {dt:.0f}s")
    assert ok


@pytest.mark.slow
def test_ablation_ladder(tmp_path):
    cfg = load_config(CONFIGS / "ablation.yaml")
    rows = run_ablation(cfg, SEEDS, tmp_path / "ablation")
    # determinism: repeat one seed of the final row and compare its report
    final = ladder_configs(cfg)[-1][1].with_seed(SEEDS[0])
    same = run_training(final, None, command="ablate").report.as_record() == rows[-1]["per_seed"][0]
    by = {r["config"]: r for r in rows}
    ok = [r["config"] for r in rows] == list(LADDER) and by["+feedback"]["ap"] >= by["baseline"]["ap"] and same
    record("ablation ladder", ok, " -> ".join(f"{r['config']} {r['ap']:.4f}" for r in rows)
           + f"; final >= baseline; rerun identical: {same}")
    assert ok


@pytest.mark.slow
def test_trainability_floor():
    cfg = load_config(CONFIGS / "default.yaml")
    assert cfg.world.box_noise == cfg.world.landmark_noise == cfg.world.pose_noise == 0.0
    assert cfg.train.epochs == 60 and cfg.train.uml and cfg.train.feedback and cfg.model.stitch_mode != "none"
    t0 = time.perf_counter()
    rep = run_training(cfg, None).report
    dt = time.perf_counter() - t0
    ok = (rep.ap >= TRAIN_AP_FLOOR and rep.nme <= TRAIN_NME_CEIL and rep.mae_mean <= TRAIN_MAE_CEIL
          and dt <= 900)
    record("trainability floor", ok, f"AP {rep.ap:.4f} >= {TRAIN_AP_FLOOR}, NME {rep.nme:.4f} <= {TRAIN_NME_CEIL}, "
                                     f"pose MAE {rep.mae_mean:.2f} <= {TRAIN_MAE_CEIL} deg; {dt:.0f}s")
    assert ok


def test_determinism(tmp_path):
    args = ["train", "-c", str(CONFIGS / "smoke.yaml")]
    assert cli_main([*args, "--out", str(tmp_path / "a")]) == 0
    assert cli_main([*args, "--out", str(tmp_path / "b")]) == 0
    names = ["manifest.json", "metrics.jsonl", "last.ckpt", "final.ckpt", "eval.json"]
    same = {n: (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names}
    ok = all(same.values())
    record("determinism", ok, "byte-identical: " + ", ".join(f"{n}={v}" for n, v in same.items()))
    assert ok
