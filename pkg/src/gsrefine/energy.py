"""Photo-consistency energy and its analytic gradient.

The objective is E = E_sim - w_reg * E_reg, maximized over the per-vertex
normal displacements k.

E_sim sums, per camera and image Gaussian, the color-weighted overlap of the
projected surface Gaussians with that image Gaussian, clamped at the image
Gaussian's self-overlap E_ii = pi * sigma_i^2 and normalized by it. The
clamp implicitly handles occlusion: stacked projections cannot contribute
more than once, and a clamped (saturated) image Gaussian contributes zero
gradient.

E_reg penalizes displacement differences between geodesically nearby
Gaussians, weighted by a Wendland falloff in edge distance. The sum runs
over ordered pairs, so each unordered pair counts twice; the factor-4
gradient below is consistent with exactly that convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import StaleCacheError
from .image_model import ImageGaussian, color_distance
from .scene_io import Mesh
from .surface_model import ProjectedGaussian, SurfaceGaussians, project_gaussians

TWO_PI = 2.0 * math.pi
FOUR_PI = 4.0 * math.pi


@dataclass(frozen=True)
class EnergyParams:
    w_reg: float = 1.0
    delta_color: float = 0.05
    delta_geo: float = 2.0  # edges
    cull_factor: float = 3.0
    circular_hue: bool = True

    def __post_init__(self):
        if self.w_reg < 0:
            raise ValueError("w_reg must be >= 0")
        if self.delta_color <= 0 or self.delta_geo <= 0 or self.cull_factor <= 0:
            raise ValueError("delta_color, delta_geo, cull_factor must be > 0")


def wendland(delta: float, support: float):
    """(1 - d/D)^4 (4 d/D + 1) for d < D, else 0. Maps [0, D) onto (0, 1]."""
    return kernels.numpy_backend.wendland(delta, support)


class NeighborGraph:
    """Symmetric geodesic neighborhoods of the surface Gaussians in CSR form.

    Entry (s, j) exists iff vertex j is reachable from vertex s within
    fewer than delta_geo edges through refinable vertices; its weight is the
    Wendland falloff of the edge distance. Both directions are stored.
    """

    def __init__(self, indptr, indices, weights):
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.weights = np.asarray(weights, dtype=np.float64)
        n = len(self.indptr) - 1
        self.rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(self.indptr))
        self.weight_sums = np.bincount(self.rows, weights=self.weights, minlength=n)

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    def neighbor_lists(self):
        return [
            list(zip(self.indices[self.indptr[s] : self.indptr[s + 1]], self.weights[self.indptr[s] : self.indptr[s + 1]]))
            for s in range(self.n)
        ]

    @staticmethod
    def build(mesh: Mesh, gaussians: SurfaceGaussians, params: EnergyParams) -> "NeighborGraph":
        """BFS on the refinable-vertex subgraph out to delta_geo edges."""
        gid = {int(v): i for i, v in enumerate(gaussians.vertex_ids)}
        adj = [[] for _ in range(len(gaussians))]
        for a, b in mesh.edges():
            ga, gb = gid.get(int(a)), gid.get(int(b))
            if ga is not None and gb is not None:
                adj[ga].append(gb)
                adj[gb].append(ga)
        max_hops = int(math.ceil(params.delta_geo)) - 1 if params.delta_geo == int(params.delta_geo) else int(params.delta_geo)
        indptr = [0]
        indices, weights = [], []
        for s in range(len(gaussians)):
            dist = {s: 0}
            frontier = [s]
            hops = 0
            while frontier and hops < max_hops:
                hops += 1
                nxt = []
                for u in frontier:
                    for w in adj[u]:
                        if w not in dist:
                            dist[w] = hops
                            nxt.append(w)
                frontier = nxt
            for j in sorted(dist):
                if j == s:
                    continue
                indices.append(j)
                weights.append(kernels.numpy_backend.wendland(dist[j], params.delta_geo))
            indptr.append(len(indices))
        return NeighborGraph(np.array(indptr), np.array(indices, dtype=np.int64), np.array(weights))


@dataclass
class EnergyState:
    """Immutable-per-pass snapshot of everything the energy depends on.

    images: one ImageGaussians per camera, index-aligned with cams.
    visibility: (n_cams, n_gaussians) bool (already mapped to Gaussians).
    """

    gaussians: SurfaceGaussians
    cams: list
    images: list
    visibility: np.ndarray
    graph: NeighborGraph

    def __post_init__(self):
        self.visibility = np.asarray(self.visibility, dtype=bool)
        if self.visibility.shape != (len(self.cams), len(self.gaussians)):
            raise ValueError("visibility must be (n_cams, n_gaussians)")
        if len(self.images) != len(self.cams):
            raise ValueError("need one image-Gaussian set per camera")


@dataclass(frozen=True)
class EnergyReport:
    e_total: float
    e_sim: float
    e_reg: float
    per_camera: np.ndarray
    saturated: int
    pairs_evaluated: int


@dataclass
class SimilarityCache:
    """Projection and pair data from one similarity pass, reused by the
    gradient so both sides share one saturation decision."""

    k_snapshot: np.ndarray
    e_sim: float
    per_camera: np.ndarray
    saturated: int
    pairs_evaluated: int
    cam_data: list = field(default_factory=list)


def pair_overlap(g_proj: ProjectedGaussian, g_img: ImageGaussian, color_dist: float, params: EnergyParams) -> float:
    """Closed-form color-weighted overlap of one projected surface Gaussian
    with one image Gaussian; zero when the distance cull excludes the pair.

    This is the exact integral of the product of the two unnormalized
    Gaussians: 2 pi (ss^2 si^2 / S) exp(-D / (2 S)) with S = ss^2 + si^2,
    so the self-overlap at D = 0 is exactly pi sigma^2.
    """
    diff = g_img.mu - g_proj.mu
    d2 = float(diff @ diff)
    S = g_proj.sigma**2 + g_img.sigma**2
    if d2 > params.cull_factor**2 * S:
        return 0.0
    T = wendland(color_dist, params.delta_color)
    return T * TWO_PI * (g_proj.sigma**2 * g_img.sigma**2 / S) * math.exp(-d2 / (2.0 * S))


def self_overlap(sigma: float) -> float:
    """Maximum obtainable overlap of an image Gaussian: pi * sigma^2."""
    return math.pi * sigma * sigma


def similarity_energy(state: EnergyState, params: EnergyParams, backend=None):
    """Evaluate E_sim; returns (e_sim, cache) with everything the gradient
    needs to reuse this pass's saturation decisions."""
    kern = kernels.get_backend(backend)
    g = state.gaussians
    n_c = len(state.cams)
    means = g.means()
    per_cam = np.zeros(n_c)
    cache = SimilarityCache(
        k_snapshot=g.k.copy(),
        e_sim=0.0,
        per_camera=per_cam,
        saturated=0,
        pairs_evaluated=0,
    )
    for ci, cam in enumerate(state.cams):
        imgs = state.images[ci]
        vis_idx = np.flatnonzero(state.visibility[ci])
        mu_p, sig_p, depth = project_gaussians(cam, means[vis_idx], g.sigma_hat[vis_idx])
        infront = depth > 0
        if not infront.all():
            vis_idx = vis_idx[infront]
            mu_p, sig_p, depth = mu_p[infront], sig_p[infront], depth[infront]
        eii = np.pi * imgs.sigma**2
        pair_i, pair_s, pair_T, pair_E, sums, n_cand = kern.find_pairs(
            np.ascontiguousarray(mu_p),
            np.ascontiguousarray(sig_p),
            np.ascontiguousarray(g.eta[vis_idx]),
            imgs.mu,
            imgs.sigma,
            imgs.eta,
            params.cull_factor,
            params.delta_color,
            params.circular_hue,
        )
        unsaturated = sums < eii
        per_cam[ci] = float(np.sum(np.minimum(sums, eii) / eii)) if len(imgs) else 0.0

        pn = (cam.P[:, :3] @ g.normals[vis_idx].T).T  # homogeneous normal: 4th comp 0
        with np.errstate(invalid="ignore"):
            dmu = (pn[:, :2] - mu_p * pn[:, 2:3]) / depth[:, None]
        cache.cam_data.append(
            dict(
                vis_idx=vis_idx,
                mu_p=mu_p,
                sig_p=sig_p,
                depth=depth,
                pnz=np.ascontiguousarray(pn[:, 2]),
                dmu=np.ascontiguousarray(dmu),
                pair_i=pair_i,
                pair_s=pair_s,
                pair_T=pair_T,
                pair_E=pair_E,
                sums=sums,
                eii=eii,
                unsaturated=unsaturated,
            )
        )
        cache.saturated += int((~unsaturated).sum())
        cache.pairs_evaluated += int(n_cand)
    cache.e_sim = float(per_cam.sum() / n_c) if n_c else 0.0
    return cache.e_sim, cache


def regularization_energy(k: np.ndarray, graph: NeighborGraph) -> float:
    """E_reg over ordered neighbor pairs: sum of T(d_sj) (k_s - k_j)^2."""
    if len(graph.indices) == 0:
        return 0.0
    diff = k[graph.rows] - k[graph.indices]
    return float(np.sum(graph.weights * diff * diff))


def regularization_gradient(k: np.ndarray, graph: NeighborGraph) -> np.ndarray:
    """d E_reg / d k_s = 4 sum_j T(d_sj) (k_s - k_j)."""
    wk = np.bincount(graph.rows, weights=graph.weights * k[graph.indices], minlength=graph.n)
    return 4.0 * (graph.weight_sums * k - wk)


def total_energy(state: EnergyState, params: EnergyParams, backend=None) -> EnergyReport:
    report, _ = evaluate(state, params, backend=backend)
    return report


def evaluate(state: EnergyState, params: EnergyParams, backend=None):
    """One full energy evaluation; returns (EnergyReport, SimilarityCache)."""
    e_sim, cache = similarity_energy(state, params, backend=backend)
    e_reg = regularization_energy(state.gaussians.k, state.graph)
    report = EnergyReport(
        e_total=e_sim - params.w_reg * e_reg,
        e_sim=e_sim,
        e_reg=e_reg,
        per_camera=cache.per_camera.copy(),
        saturated=cache.saturated,
        pairs_evaluated=cache.pairs_evaluated,
    )
    return report, cache


def gradient(state: EnergyState, params: EnergyParams, cache: SimilarityCache, backend=None) -> np.ndarray:
    """Analytic dE/dk for every surface Gaussian.

    Requires the cache of a similarity pass over the exact same k; raises
    StaleCacheError otherwise. Image Gaussians saturated in that pass
    contribute zero, matching the clamped energy.
    """
    g = state.gaussians
    if not np.array_equal(cache.k_snapshot, g.k):
        raise StaleCacheError("displacements changed since the cached similarity pass")
    kern = kernels.get_backend(backend)
    n_c = len(state.cams)
    grad = np.zeros(len(g))
    for ci in range(n_c):
        cd = cache.cam_data[ci]
        if len(cd["vis_idx"]) == 0 or len(cd["pair_i"]) == 0:
            continue
        local = kern.grad_scatter(
            cd["pair_i"],
            cd["pair_s"],
            cd["pair_T"],
            np.ascontiguousarray(cd["unsaturated"].astype(np.uint8)),
            cd["mu_p"],
            cd["sig_p"],
            cd["depth"],
            cd["pnz"],
            cd["dmu"],
            state.images[ci].mu,
            state.images[ci].sigma,
            cd["eii"],
        )
        grad[cd["vis_idx"]] += local
    grad /= max(n_c, 1)
    if params.w_reg != 0.0:
        grad -= params.w_reg * regularization_gradient(g.k, state.graph)
    return grad
