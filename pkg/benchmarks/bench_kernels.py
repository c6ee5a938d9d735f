#!/usr/bin/env python3
"""Benchmark the compiled pair-accumulation kernel against the numpy
fallback on scenes of increasing size.

Usage: python benchmarks/bench_kernels.py [--repeats N]

Times one full energy evaluation plus gradient per backend and prints a
table with the speedup. The same numbers serve as the throughput
regression track for the ~3000-Gaussian / 8-camera / 1000x1000 scenario.
"""

import argparse
import time

import numpy as np

from gsrefine import solver
from gsrefine.energy import EnergyParams, evaluate, gradient
from gsrefine.kernels import HAVE_COMPILED
from gsrefine.surface_model import assign_colors, fill_uncolored
from gsrefine.synth_bench import make_scene


def build_state(grid_n, resolution, n_cameras=8):
    scene = make_scene(
        "plane-wave",
        n_cameras=n_cameras,
        resolution=resolution,
        amplitude_mm=10.0,
        grid_n=grid_n,
        seed=0,
    )
    params = EnergyParams(w_reg=5e-4)
    frame = solver.prepare_frame(scene.coarse, scene.images, scene.cams, params, subdiv_levels=0)
    assign_colors(frame.gaussians, scene.images, frame.cams, frame.vertex_visibility)
    fill_uncolored(frame.gaussians, frame.mesh)
    return frame.energy_state(), params


def time_backend(state, params, backend, repeats):
    evaluate(state, params, backend=backend)  # warm-up
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        rep, cache = evaluate(state, params, backend=backend)
        gradient(state, params, cache, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best, rep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    cases = [
        ("small  (441 G, 4 cams, 256px)", dict(grid_n=21, resolution=(256, 256), n_cameras=4)),
        ("medium (1681 G, 8 cams, 512px)", dict(grid_n=41, resolution=(512, 512))),
        ("target (3025 G, 8 cams, 1000px)", dict(grid_n=55, resolution=(1000, 1000))),
    ]
    print(f"{'case':34} {'pairs':>9} {'python':>10} {'compiled':>10} {'speedup':>8}")
    for label, kw in cases:
        state, params = build_state(**kw)
        t_py, rep = time_backend(state, params, "python", args.repeats)
        if HAVE_COMPILED:
            t_cy, _ = time_backend(state, params, "compiled", args.repeats)
            print(
                f"{label:34} {rep.pairs_evaluated:>9} {t_py * 1e3:>8.1f}ms {t_cy * 1e3:>8.1f}ms "
                f"{t_py / t_cy:>7.1f}x"
            )
        else:
            print(f"{label:34} {rep.pairs_evaluated:>9} {t_py * 1e3:>8.1f}ms {'n/a':>10} {'n/a':>8}")


if __name__ == "__main__":
    main()
