"""Compare the compiled kernels with their numpy fallback, plus one training step.

Usage: python benchmarks/bench_kernels.py [--repeats N] [--steps N] [--config PATH]
"""

import argparse

from mtface import kernels
from mtface.bench import kernel_benchmark, step_benchmark
from mtface.config import load_config


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--repeats", type=int, default=200)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--config", help="experiment config for the step timing (defaults when omitted)")
    args = p.parse_args()

    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':24s} {'python (us)':>12s} {'cython (us)':>12s} {'speedup':>8s}")
    for r in kernel_benchmark(args.repeats):
        cy = r.get("cython_s")
        cy_txt = f"{cy * 1e6:12.1f}" if cy is not None else f"{'n/a':>12s}"
        sp_txt = f"{r['speedup']:8.1f}" if cy is not None else f"{'n/a':>8s}"
        print(f"{r['kernel']:24s} {r['python_s'] * 1e6:12.1f} {cy_txt} {sp_txt}")

    step = step_benchmark(load_config(args.config), args.steps)
    print(f"train step: batch {step['batch_size']}, {step['seconds_per_step'] * 1e3:.1f} ms/step, "
          f"{step['scenes_per_second']:.1f} scenes/s")


if __name__ == "__main__":
    main()
