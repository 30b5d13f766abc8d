"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from trajdyn import kernels
from trajdyn.kernels import python_backend

CP = (1.0, 0.1, 0.5, 9.8, 0.02)
ARM = (1.0, 1.0, 1.0, 0.8, 9.8, 0.02)


def cases(rng):
    s = rng.normal(size=(512, 4))
    f = rng.normal(0, 10, 512)
    s0 = rng.normal(0, 0.05, size=4)
    gains = rng.normal(size=(256, 4)) * np.array([-0.7, -1.5, -28.0, -6.0])
    lengths = rng.integers(50, 201, size=100)
    return {
        "cartpole_step_batch (512)": lambda b: b.cartpole_step_batch(s, f, *CP),
        "arm_step_batch (512)": lambda b: b.arm_step_batch(s, f[:, None].repeat(2, 1), *ARM),
        "cartpole_linear_rollout_batch (256x200)": lambda b: b.cartpole_linear_rollout_batch(s0, gains, 200, *CP, 0.4, 2.4),
        "relabel_index (100 trajs)": lambda b: b.relabel_index(lengths),
    }


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    if kernels.compiled_backend is None:
        print("compiled extension not built; run `pip install --no-build-isolation -e .` first")
        return
    backends = {"compiled": kernels.compiled_backend, "python": python_backend}
    print(f"{'kernel':42s} {'compiled ms':>12s} {'python ms':>12s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        t = {}
        for label, b in backends.items():
            n, _ = timeit.Timer(lambda: fn(b)).autorange()
            t[label] = min(timeit.repeat(lambda: fn(b), number=n, repeat=args.repeat)) / n * 1e3
        print(f"{name:42s} {t['compiled']:12.3f} {t['python']:12.3f} {t['python'] / t['compiled']:7.1f}x")


if __name__ == "__main__":
    main()
