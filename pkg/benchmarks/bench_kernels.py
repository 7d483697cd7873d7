"""Timing comparison of the compiled and pure-Python trajectory kernels.

Runs the same seeded workload through both backends, checks the outputs
agree bitwise, and prints per-backend wall times with the speedup ratio.

Usage: python3 benchmarks/bench_kernels.py [--steps N] [--reps R]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from splitavf import LangevinModel, State, builtin_potential, generate_path, sample_key
from splitavf._kernels import get_backend, poly_pack
from splitavf.integrators import integrate_with_stats, make_avf_config
from splitavf.noise import all_coarse_increments, convolution_weights


def _workload(model, h, T, seed):
    path = generate_path(sample_key(seed, 0), T, h / 16.0, model.d)
    return path


def _run(model, scheme, path, h, kernels):
    traj, stats = integrate_with_stats(model, scheme, path, h, kernels=kernels)
    return traj


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=4096, help="coarse steps per trajectory")
    ap.add_argument("--reps", type=int, default=5, help="repetitions per backend")
    args = ap.parse_args()

    pot = builtin_potential("coupled2d", m=2)
    model = LangevinModel(
        m=2, d=2, v=1.0, sigma=np.eye(2),
        potential=pot, x0=State(p=[1.0, 1.0], q=[1.0, 1.0]),
    )
    h = 1.0 / args.steps
    path = _workload(model, h, 1.0, seed=2024)

    backends = {}
    for name in ("compiled", "python"):
        try:
            backends[name] = get_backend(name)
        except ImportError:
            print("%-9s unavailable (extension not built)" % name)

    results = {}
    for scheme in ("avf_split", "tamed_euler"):
        print("\n== %s, %d steps, %d reps ==" % (scheme, args.steps, args.reps))
        times = {}
        for name, mod in backends.items():
            best = float("inf")
            for _ in range(args.reps):
                t0 = time.perf_counter()
                traj = _run(model, scheme, path, h, mod)
                best = min(best, time.perf_counter() - t0)
            times[name] = best
            results[(scheme, name)] = traj
            print("%-9s %8.2f ms" % (name, 1e3 * best))
        if len(times) == 2:
            gap = float(np.max(np.abs(
                results[(scheme, "compiled")] - results[(scheme, "python")]
            )))
            print("speedup   %8.1fx   max abs output gap: %.3g"
                  % (times["python"] / times["compiled"], gap))


if __name__ == "__main__":
    main()
