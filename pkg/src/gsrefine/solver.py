"""Conditioned gradient ascent over the displacement vector k, and the
per-frame / per-sequence refinement pipelines.

The update is sign-based resilient conditioning: each variable carries its
own step size, grown while the gradient sign stays constant and shrunk when
it flips, with the step clamped to [step_min, step_max]. The iterate with
the best energy seen is the one returned, so overshoot near a maximum can
never worsen the final state.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import scene_io
from .energy import EnergyParams, EnergyState, NeighborGraph, evaluate, gradient
from .errors import GsRefineError, NumericalError
from .image_model import QuadTreeParams, decompose_image
from .scene_io import Mesh
from .surface_model import (
    DEFAULT_SIGMA_HAT,
    SurfaceGaussians,
    assign_colors,
    build_surface_gaussians,
    compute_normals,
    fill_uncolored,
    subdivide,
    visibility_for_mesh,
)

CONVERGENCE_WINDOW = 5


@dataclass(frozen=True)
class SolverConfig:
    initial_step: float = 0.1  # mm
    grow: float = 1.2
    shrink: float = 0.5
    step_min: float = 1e-4  # mm
    step_max: float = 5.0  # mm
    max_iters: int = 200
    convergence_eps: float = 1e-6  # relative energy change over the window
    visibility_refresh: int = 10  # iterations

    def __post_init__(self):
        if not (0 < self.shrink < 1 < self.grow):
            raise ValueError("need 0 < shrink < 1 < grow")
        if not (0 < self.step_min <= self.step_max):
            raise ValueError("need 0 < step_min <= step_max")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.visibility_refresh < 1:
            raise ValueError("visibility_refresh must be >= 1")


@dataclass
class ConditionerState:
    """Per-variable step sizes and previous gradient signs."""

    steps: np.ndarray
    prev_sign: np.ndarray

    @staticmethod
    def fresh(n: int, config: SolverConfig) -> "ConditionerState":
        return ConditionerState(np.full(n, config.initial_step), np.zeros(n))

    def update(self, grad: np.ndarray, config: SolverConfig) -> np.ndarray:
        """Adapt steps from the sign history and return the k increment."""
        sign = np.sign(grad)
        prod = sign * self.prev_sign
        self.steps[prod > 0] *= config.grow
        self.steps[prod < 0] *= config.shrink
        np.clip(self.steps, config.step_min, config.step_max, out=self.steps)
        self.prev_sign = sign
        return self.steps * sign


@dataclass
class RefinementReport:
    iterations: int
    e_initial: float
    e_final: float
    trace: list  # EnergyReport per evaluation, index 0 = initial state
    max_abs_k: float
    seconds: float


def ascend(k0: np.ndarray, evaluate_fn, config: SolverConfig):
    """Generic conditioned ascent on E(k); evaluate_fn(k) -> (E, grad).

    Returns (best_k, energies, iterations). Used directly by tests with
    closed-form objectives; ascend_frame wraps the scene energy in it.
    """
    k = np.array(k0, dtype=np.float64)
    cond = ConditionerState.fresh(len(k), config)
    e, g = evaluate_fn(k)
    energies = [e]
    best_e, best_k = e, k.copy()
    it = 0
    for it in range(1, config.max_iters + 1):
        k = k + cond.update(np.asarray(g, dtype=np.float64), config)
        e, g = evaluate_fn(k)
        energies.append(e)
        if e > best_e:
            best_e, best_k = e, k.copy()
        if _converged(energies, config):
            break
    return best_k, energies, it


def _converged(energies, config: SolverConfig) -> bool:
    if len(energies) <= CONVERGENCE_WINDOW:
        return False
    ref = max(abs(energies[-1]), 1e-30)
    return abs(energies[-1] - energies[-1 - CONVERGENCE_WINDOW]) / ref < config.convergence_eps


@dataclass
class FrameScene:
    """Everything one frame's optimization needs, built by prepare_frame."""

    mesh: Mesh  # subdivided
    normals: np.ndarray
    gaussians: SurfaceGaussians
    cams: list
    image_gaussians: list
    graph: NeighborGraph
    vertex_visibility: np.ndarray  # (n_cams, n_vertices)
    sigma_hat: float

    def energy_state(self) -> EnergyState:
        return EnergyState(
            gaussians=self.gaussians,
            cams=self.cams,
            images=self.image_gaussians,
            visibility=self.vertex_visibility[:, self.gaussians.vertex_ids],
            graph=self.graph,
        )

    def displaced_vertices(self, bias: float = 0.0) -> np.ndarray:
        verts = self.mesh.vertices.copy()
        g = self.gaussians
        verts[g.vertex_ids] = g.mu_orig + g.normals * (g.k + bias)[:, None]
        return verts

    def refresh_visibility(self) -> None:
        self.vertex_visibility = visibility_for_mesh(
            self.mesh, self.normals, self.cams, self.sigma_hat, vertices=self.displaced_vertices()
        )


def prepare_frame(
    mesh: Mesh,
    images: list,
    cams: list,
    energy_params: EnergyParams,
    *,
    subdiv_levels: int = 1,
    sigma_hat: float = DEFAULT_SIGMA_HAT,
    quad_params: QuadTreeParams | None = None,
    threads: int = 1,
) -> FrameScene:
    """Subdivide, build Gaussians and neighborhoods, decompose the images,
    and compute initial visibility. Colors are not assigned here."""
    if len(images) != len(cams):
        raise GsRefineError(f"got {len(images)} images for {len(cams)} cameras")
    quad_params = quad_params or QuadTreeParams()
    fine = subdivide(mesh, subdiv_levels)
    normals = compute_normals(fine)
    gaussians = build_surface_gaussians(fine, normals, sigma_hat)
    graph = NeighborGraph.build(fine, gaussians, energy_params)
    image_gaussians = _decompose_all(images, quad_params, threads)
    scene = FrameScene(
        mesh=fine,
        normals=normals,
        gaussians=gaussians,
        cams=list(cams),
        image_gaussians=image_gaussians,
        graph=graph,
        vertex_visibility=np.zeros((len(cams), fine.n_vertices), dtype=bool),
        sigma_hat=sigma_hat,
    )
    scene.refresh_visibility()
    return scene


def _decompose_all(images, quad_params, threads):
    if threads == 1 or len(images) <= 1:
        return [decompose_image(img, quad_params, cam_id=i) for i, img in enumerate(images)]
    workers = threads if threads > 0 else None
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(decompose_image, img, quad_params, cam_id=i) for i, img in enumerate(images)]
        return [f.result() for f in futs]


def ascend_frame(scene: FrameScene, energy_params: EnergyParams, config: SolverConfig) -> RefinementReport:
    """Maximize the frame energy in place over scene.gaussians.k."""
    t0 = time.perf_counter()
    g = scene.gaussians
    cond = ConditionerState.fresh(len(g), config)
    state = scene.energy_state()
    report, cache = evaluate(state, energy_params)
    _check_finite_energy(report.e_total, g)
    trace = [report]
    best_e, best_k = report.e_total, g.k.copy()
    iterations = 0
    for iterations in range(1, config.max_iters + 1):
        grad = gradient(state, energy_params, cache)
        _check_finite_gradient(grad, g)
        g.k += cond.update(grad, config)
        if iterations % config.visibility_refresh == 0:
            scene.refresh_visibility()
            state = scene.energy_state()
        report, cache = evaluate(state, energy_params)
        _check_finite_energy(report.e_total, g)
        trace.append(report)
        if report.e_total > best_e:
            best_e, best_k = report.e_total, g.k.copy()
        if _converged([r.e_total for r in trace], config):
            break
    g.k[:] = best_k
    return RefinementReport(
        iterations=iterations,
        e_initial=trace[0].e_total,
        e_final=best_e,
        trace=trace,
        max_abs_k=float(np.max(np.abs(best_k))) if len(best_k) else 0.0,
        seconds=time.perf_counter() - t0,
    )


def _check_finite_energy(e, gaussians):
    if not np.isfinite(e):
        raise NumericalError(f"energy became non-finite ({e})")


def _check_finite_gradient(grad, gaussians):
    bad = ~np.isfinite(grad)
    if bad.any():
        s = int(np.argmax(bad))
        raise NumericalError(
            f"non-finite gradient for Gaussian {s} (vertex {int(gaussians.vertex_ids[s])})"
        )


def refine_frame(
    mesh: Mesh,
    images: list,
    cams: list,
    energy_params: EnergyParams | None = None,
    config: SolverConfig | None = None,
    *,
    subdiv_levels: int = 1,
    sigma_hat: float = DEFAULT_SIGMA_HAT,
    quad_params: QuadTreeParams | None = None,
    bias: bool = True,
    colors: np.ndarray | None = None,
    k_init: np.ndarray | None = None,
    threads: int = 1,
):
    """Full single-frame pipeline; returns (refined Mesh, RefinementReport,
    FrameScene). With bias enabled, exported refinable vertices receive an
    extra sigma_hat offset along their normals to compensate the shrink
    toward the surface that the Gaussians' spatial extent causes; the
    geometry used during optimization is un-biased."""
    energy_params = energy_params or EnergyParams()
    config = config or SolverConfig()
    scene = prepare_frame(
        mesh,
        images,
        cams,
        energy_params,
        subdiv_levels=subdiv_levels,
        sigma_hat=sigma_hat,
        quad_params=quad_params,
        threads=threads,
    )
    if colors is not None:
        scene.gaussians.eta[:] = colors
    else:
        assign_colors(scene.gaussians, images, scene.cams, scene.vertex_visibility)
        fill_uncolored(scene.gaussians, scene.mesh)
    if k_init is not None:
        scene.gaussians.k[:] = k_init
    report = ascend_frame(scene, energy_params, config)
    refined = scene.mesh.with_vertices(scene.displaced_vertices(bias=sigma_hat if bias else 0.0))
    return refined, report, scene


def refine_sequence(
    manifest: scene_io.SequenceManifest,
    energy_params: EnergyParams | None = None,
    config: SolverConfig | None = None,
    **frame_kwargs,
):
    """Refine every frame of a sequence in order.

    Colors are assigned once, on the reference frame's coarse geometry, and
    reused for every frame; k warm-starts from the previous frame's
    solution. Yields (frame_index, refined Mesh, RefinementReport, FrameScene).
    """
    energy_params = energy_params or EnergyParams()
    config = config or SolverConfig()
    cams = scene_io.load_cameras(manifest.camera_path)
    colors = _reference_colors(manifest, cams, energy_params, frame_kwargs)
    k_prev = None
    topology = None
    for fi, (mesh_path, image_paths) in enumerate(manifest.frames):
        mesh = _load_masked_mesh(mesh_path, manifest.mask_path)
        if topology is None:
            topology = (mesh.n_vertices, mesh.faces.copy())
        elif mesh.n_vertices != topology[0] or not np.array_equal(mesh.faces, topology[1]):
            raise GsRefineError(f"frame {fi} ({mesh_path}): topology differs from frame 0")
        images = [scene_io.load_image(p) for p in image_paths]
        refined, report, scene = refine_frame(
            mesh,
            images,
            cams,
            energy_params,
            config,
            colors=colors,
            k_init=k_prev,
            **frame_kwargs,
        )
        k_prev = scene.gaussians.k.copy()
        yield fi, refined, report, scene


def _load_masked_mesh(mesh_path, mask_path):
    mesh = scene_io.load_mesh(mesh_path)
    if mask_path:
        mask = scene_io.load_region_mask(mask_path, mesh.n_vertices)
        mesh = scene_io.Mesh(mesh.vertices.copy(), mesh.faces.copy(), mask)
    return mesh


def _reference_colors(manifest, cams, energy_params, frame_kwargs):
    """Color the Gaussians on the reference frame's coarse geometry.

    Quad-tree decomposition is not needed here, only visibility, so this is
    deliberately lighter than prepare_frame."""
    mesh_path, image_paths = manifest.frames[manifest.reference_frame]
    mesh = _load_masked_mesh(mesh_path, manifest.mask_path)
    images = [scene_io.load_image(p) for p in image_paths]
    sigma_hat = frame_kwargs.get("sigma_hat", DEFAULT_SIGMA_HAT)
    fine = subdivide(mesh, frame_kwargs.get("subdiv_levels", 1))
    normals = compute_normals(fine)
    gaussians = build_surface_gaussians(fine, normals, sigma_hat)
    vis = visibility_for_mesh(fine, normals, cams, sigma_hat)
    assign_colors(gaussians, images, cams, vis)
    fill_uncolored(gaussians, fine)
    return gaussians.eta.copy()
