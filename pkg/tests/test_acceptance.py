"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s`. The synthetic-recovery
scenario (criterion 5) is shared with the determinism check (criterion 8)
through a module-scoped fixture so the expensive refinement runs exactly
twice, as the determinism criterion requires.
"""

import io
import time

import numpy as np
import pytest

from gsrefine import checks, solver, synth_bench
from gsrefine.energy import (
    EnergyParams,
    NeighborGraph,
    evaluate,
    gradient,
    regularization_energy,
    similarity_energy,
    wendland,
)
from gsrefine.solver import SolverConfig
from gsrefine.synth_bench import displacement_rmse, make_scene, reprojection_error

RECOVERY_ENERGY = EnergyParams(w_reg=1e-3)
RECOVERY_SOLVER = SolverConfig(max_iters=250)
RECOVERY_SCENE = dict(
    kind="plane-wave",
    n_cameras=8,
    resolution=(512, 512),
    amplitude_mm=10.0,
    grid_n=81,
    seed=0,
)


def report(criterion, passed, detail):
    # visible with `pytest -s` (the documented way to run this module) and
    # in pytest's captured-output section whenever a criterion fails
    print(f"\n[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}")


def test_criterion_1_overlap_fidelity():
    t0 = time.perf_counter()
    worst, n = checks.check_overlap_closed_form(n_pairs=1000, seed=0)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed <= 60.0
    report(1, ok, f"closed form vs quadrature max rel err {worst:.3e} over {n} pairs in {elapsed:.1f}s")
    assert worst <= 1e-4
    assert elapsed <= 60.0


def test_criterion_2_gradient_exactness():
    t0 = time.perf_counter()
    worst, n = checks.check_gradient_fd(n_scenes=100, seed=0, h=1e-4)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and elapsed <= 120.0
    report(2, ok, f"analytic vs central differences max rel err {worst:.3e} over {n} scenes in {elapsed:.1f}s")
    assert worst <= 1e-5
    assert elapsed <= 120.0


def test_criterion_3_regularizer_identities():
    max_zero, min_perturbed, worst_grad = checks.check_regularizer(n_graphs=50, seed=0)
    w = wendland(1.0, 2.0)
    graph = NeighborGraph(np.array([0, 1, 2]), np.array([1, 0]), np.array([w, w]))
    hand = regularization_energy(np.array([1.0, 0.0]), graph)
    ok = max_zero == 0.0 and min_perturbed > 0.0 and worst_grad <= 1e-8 and hand == 0.375
    report(
        3,
        ok,
        f"constant-k E_reg {max_zero:.1e}; perturbed min {min_perturbed:.3e}; "
        f"grad vs FD {worst_grad:.3e}; two-vertex value {hand}",
    )
    assert max_zero == 0.0
    assert min_perturbed > 0.0
    assert worst_grad <= 1e-8
    assert hand == 0.375


def test_criterion_4_occlusion_clamp():
    from tests.test_energy import matched_state

    single, params = matched_state(n_dup=1, sigma_img=2.0)
    double, _ = matched_state(n_dup=2, sigma_img=2.0)
    e1, _ = similarity_energy(single, params)
    e2, cache2 = similarity_energy(double, params)
    delta = abs(e2 - e1)

    sums = cache2.cam_data[0]["sums"]
    eii = cache2.cam_data[0]["eii"]
    saturated = sums >= eii
    grad2 = gradient(double, params, cache2)
    grads_zero = saturated.all() and np.array_equal(grad2, np.zeros(2))

    ok = delta <= 1e-12 and grads_zero
    report(
        4,
        ok,
        f"E_sim change on duplication {delta:.2e}; saturated image Gaussians {int(saturated.sum())}/1; "
        f"their gradient contributions exactly zero: {grads_zero}",
    )
    assert delta <= 1e-12
    assert grads_zero


@pytest.fixture(scope="module")
def recovery_runs():
    """Two identical synthetic-recovery refinements (criteria 5 and 8)."""
    scene = make_scene(**RECOVERY_SCENE)
    runs = []
    for _ in range(2):
        t0 = time.perf_counter()
        refined, rep, frame = solver.refine_frame(
            scene.coarse,
            scene.images,
            scene.cams,
            RECOVERY_ENERGY,
            RECOVERY_SOLVER,
            subdiv_levels=0,
            bias=False,
            threads=1,
        )
        runs.append(
            dict(refined=refined, report=rep, frame=frame, seconds=time.perf_counter() - t0)
        )
    return scene, runs


def test_criterion_5_synthetic_recovery(recovery_runs):
    scene, runs = recovery_runs
    run = runs[0]
    frame = run["frame"]
    mask = scene.coarse.refinable

    k_rec = np.zeros(scene.coarse.n_vertices)
    k_rec[frame.gaussians.vertex_ids] = frame.gaussians.k
    rmse_in = displacement_rmse(np.zeros_like(k_rec), scene.k_true, mask)
    rmse_out = displacement_rmse(k_rec, scene.k_true, mask)
    reduction = 1.0 - rmse_out / rmse_in

    # sanity: the harness-computed input RMSE matches the analytic sine RMS
    # (A/2 in the continuum; the grid samples it exactly at this resolution)
    assert abs(rmse_in - 10.0 / 2.0) < 0.15

    colors = np.zeros((scene.coarse.n_vertices, 3))
    have = np.zeros(scene.coarse.n_vertices, dtype=bool)
    seen = ~np.isnan(frame.gaussians.eta[:, 0])
    colors[frame.gaussians.vertex_ids[seen]] = frame.gaussians.eta[seen]
    have[frame.gaussians.vertex_ids[seen]] = True
    colors = synth_bench.propagate_vertex_colors(scene.coarse, colors, have)
    met_refined = reprojection_error(run["refined"], colors, scene.images, scene.cams)
    met_coarse = reprojection_error(scene.coarse, colors, scene.images, scene.cams)

    ok = (
        reduction >= 0.60
        and met_refined.overall < met_coarse.overall
        and run["seconds"] <= 600.0
    )
    report(
        5,
        ok,
        f"RMSE {rmse_in:.3f} -> {rmse_out:.3f} mm ({100 * reduction:.1f}% reduction, need >= 60%); "
        f"reprojection {met_coarse.overall:.4f} -> {met_refined.overall:.4f}; "
        f"runtime {run['seconds']:.0f}s (limit 600s)",
    )
    assert reduction >= 0.60
    assert met_refined.overall < met_coarse.overall
    assert run["seconds"] <= 600.0


def test_criterion_6_visibility_oracle():
    mismatches, total = checks.check_visibility_oracle(n_scenes=20, seed=0)
    ok = mismatches == 0 and total > 0
    report(6, ok, f"depth-buffer vs ray-cast agreement {total - mismatches}/{total} vertices over 20 scenes")
    assert total > 0
    assert mismatches == 0


def test_criterion_7_throughput_sanity():
    # ~3000 surface Gaussians, 8 cameras at 1000x1000; one energy+gradient
    # iteration. Non-binding target <= 2 s: regression-tracked, not pass/fail.
    scene = make_scene(
        "plane-wave", n_cameras=8, resolution=(1000, 1000), amplitude_mm=10.0, grid_n=57, seed=0
    )
    params = EnergyParams(w_reg=5e-4)
    frame = solver.prepare_frame(scene.coarse, scene.images, scene.cams, params, subdiv_levels=0)
    from gsrefine.surface_model import assign_colors, fill_uncolored

    assign_colors(frame.gaussians, scene.images, frame.cams, frame.vertex_visibility)
    fill_uncolored(frame.gaussians, frame.mesh)
    state = frame.energy_state()
    evaluate(state, params)  # warm-up pass outside the timed region

    t0 = time.perf_counter()
    rep, cache = evaluate(state, params)
    gradient(state, params, cache)
    elapsed = time.perf_counter() - t0
    n_g = len(frame.gaussians)
    within = elapsed <= 2.0
    report(
        7,
        True,
        f"energy+gradient iteration with {n_g} Gaussians, 8 cams @1000x1000: {elapsed * 1000:.0f} ms "
        f"({rep.pairs_evaluated} pairs; non-binding target 2000 ms: {'met' if within else 'MISSED'})",
    )
    assert n_g >= 2500  # scene is at the intended scale
    assert elapsed > 0.0  # completed; the 2 s figure is tracked, not enforced


def test_criterion_8_determinism(recovery_runs):
    scene, runs = recovery_runs

    def displacement_csv(frame):
        buf = io.StringIO()
        lines = ["vertex_id,k_mm"]
        for vid, k in zip(frame.gaussians.vertex_ids, frame.gaussians.k):
            lines.append(f"{int(vid)},{float(k)!r}")
        buf.write("\n".join(lines))
        return buf.getvalue()

    csv_a = displacement_csv(runs[0]["frame"])
    csv_b = displacement_csv(runs[1]["frame"])
    ok = csv_a == csv_b
    report(8, ok, f"two identical runs produce bit-identical displacement CSVs: {ok} ({len(csv_a)} bytes)")
    assert csv_a == csv_b
