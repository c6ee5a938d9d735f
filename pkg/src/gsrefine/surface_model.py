"""Implicit surface model: subdivision, normals, per-vertex 3D Gaussians,
their projection to camera images, visibility, and model coloring.

Each refinable vertex carries one isotropic 3D Gaussian whose mean moves
along the fixed vertex normal by a scalar displacement k (mm). Normals are
computed once per frame from the input (subdivided) mesh and held fixed
while k is optimized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import raster
from .errors import BehindCameraError, GsRefineError, MeshError
from .image_model import rgb_to_hsv
from .scene_io import CameraSpec, Mesh

DEFAULT_SIGMA_HAT = 7.0  # mm
VISIBILITY_DEPTH_TOL_FACTOR = 2.0  # tolerance = factor * sigma_hat


@dataclass(frozen=True)
class SurfaceGaussian:
    """View of one surface Gaussian: rest position, fixed unit normal,
    scalar displacement k along the normal, extent sigma_hat, HSV color."""

    vertex_id: int
    mu_orig: np.ndarray
    normal: np.ndarray
    k: float
    sigma_hat: float
    eta: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.mu_orig + self.normal * self.k


@dataclass(frozen=True)
class ProjectedGaussian:
    mu: np.ndarray
    sigma: float
    depth: float
    vertex_id: int
    cam_id: int


class SurfaceGaussians:
    """Struct-of-arrays collection of surface Gaussians (one per refinable
    vertex). k is the only mutable field; everything else is frozen."""

    def __init__(self, vertex_ids, mu_orig, normals, sigma_hat, eta=None, k=None):
        self.vertex_ids = np.ascontiguousarray(np.asarray(vertex_ids, dtype=np.int64)).reshape(-1)
        n = len(self.vertex_ids)
        self.mu_orig = np.ascontiguousarray(np.asarray(mu_orig, dtype=np.float64)).reshape(n, 3)
        self.normals = np.ascontiguousarray(np.asarray(normals, dtype=np.float64)).reshape(n, 3)
        sig = np.asarray(sigma_hat, dtype=np.float64)
        self.sigma_hat = np.ascontiguousarray(np.broadcast_to(sig, (n,)).copy())
        if not (self.sigma_hat > 0).all():
            raise ValueError("sigma_hat must be positive")
        norms = np.linalg.norm(self.normals, axis=1)
        if n and not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("normals must be unit length")
        self.eta = (
            np.full((n, 3), np.nan)
            if eta is None
            else np.ascontiguousarray(np.asarray(eta, dtype=np.float64)).reshape(n, 3)
        )
        self.k = (
            np.zeros(n, dtype=np.float64)
            if k is None
            else np.ascontiguousarray(np.asarray(k, dtype=np.float64)).reshape(n)
        )
        for arr in (self.vertex_ids, self.mu_orig, self.normals, self.sigma_hat):
            arr.setflags(write=False)

    def __len__(self):
        return len(self.vertex_ids)

    def __getitem__(self, i) -> SurfaceGaussian:
        return SurfaceGaussian(
            vertex_id=int(self.vertex_ids[i]),
            mu_orig=self.mu_orig[i].copy(),
            normal=self.normals[i].copy(),
            k=float(self.k[i]),
            sigma_hat=float(self.sigma_hat[i]),
            eta=self.eta[i].copy(),
        )

    def means(self) -> np.ndarray:
        """Current Gaussian means: mu_orig + normal * k."""
        return self.mu_orig + self.normals * self.k[:, None]


def subdivide(mesh: Mesh, levels: int = 1) -> Mesh:
    """1-to-4 midpoint subdivision, `levels` times.

    A new edge-midpoint vertex is refinable iff both edge endpoints are.
    """
    if levels < 0:
        raise ValueError("levels must be >= 0")
    for _ in range(levels):
        mesh = _subdivide_once(mesh)
    return mesh


def _subdivide_once(mesh: Mesh) -> Mesh:
    verts = [v for v in mesh.vertices]
    mask = list(mesh.refinable)
    midpoint = {}

    def edge_vertex(i, j):
        key = (i, j) if i < j else (j, i)
        idx = midpoint.get(key)
        if idx is None:
            idx = len(verts)
            verts.append((mesh.vertices[i] + mesh.vertices[j]) * 0.5)
            mask.append(bool(mesh.refinable[i] and mesh.refinable[j]))
            midpoint[key] = idx
        return idx

    faces = np.empty((4 * mesh.n_faces, 3), dtype=np.int64)
    for fidx, (i, j, l) in enumerate(mesh.faces):
        ij = edge_vertex(i, j)
        jl = edge_vertex(j, l)
        li = edge_vertex(l, i)
        faces[4 * fidx : 4 * fidx + 4] = [(i, ij, li), (ij, j, jl), (li, jl, l), (ij, jl, li)]
    return Mesh(np.array(verts), faces, np.array(mask, dtype=bool))


def compute_normals(mesh: Mesh) -> np.ndarray:
    """Per-vertex unit normals: normalized area-weighted sum of incident
    face normals. Raises on isolated vertices and degenerate accumulations."""
    v = mesh.vertices
    f = mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])  # length = 2 * area
    acc = np.zeros_like(v)
    np.add.at(acc, f[:, 0], fn)
    np.add.at(acc, f[:, 1], fn)
    np.add.at(acc, f[:, 2], fn)
    incident = np.zeros(len(v), dtype=np.int64)
    np.add.at(incident, f.ravel(), 1)
    if (incident == 0).any():
        raise MeshError(f"vertex {int(np.argmax(incident == 0))} has no incident face")
    norms = np.linalg.norm(acc, axis=1)
    if (norms <= 1e-12).any():
        raise MeshError(
            f"vertex {int(np.argmax(norms <= 1e-12))}: face normals cancel, undefined vertex normal"
        )
    return acc / norms[:, None]


def build_surface_gaussians(mesh: Mesh, normals: np.ndarray, sigma_hat: float = DEFAULT_SIGMA_HAT) -> SurfaceGaussians:
    """One Gaussian per refinable vertex, k = 0, colors unset."""
    ids = np.flatnonzero(mesh.refinable)
    return SurfaceGaussians(
        vertex_ids=ids,
        mu_orig=mesh.vertices[ids],
        normals=np.asarray(normals, dtype=np.float64)[ids],
        sigma_hat=sigma_hat,
    )


def project_gaussian(cam: CameraSpec, g: SurfaceGaussian) -> ProjectedGaussian:
    """Project one surface Gaussian; raises BehindCameraError at depth <= 0."""
    mean = g.mean
    ph = cam.P @ np.append(mean, 1.0)
    depth = ph[2]
    if depth <= 0:
        raise BehindCameraError(
            f"gaussian at vertex {g.vertex_id} has nonpositive depth {depth:.6g} in camera {cam.cam_id}"
        )
    return ProjectedGaussian(
        mu=ph[:2] / depth,
        sigma=g.sigma_hat * cam.f / depth,
        depth=float(depth),
        vertex_id=g.vertex_id,
        cam_id=cam.cam_id,
    )


def project_gaussians(cam: CameraSpec, means: np.ndarray, sigma_hat: np.ndarray):
    """Vectorized projection: returns (mu (n, 2), sigma (n,), depth (n,)).

    No depth check; callers mask on depth > 0.
    """
    xy, depth = raster.project_points(cam, means)
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma = np.asarray(sigma_hat) * cam.f / depth
    return xy, sigma, depth


def compute_visibility(mesh_vertices, normals, faces, cams, depth_tol) -> np.ndarray:
    """Per-(camera, vertex) visibility mask, shape (n_cams, n_vertices).

    A vertex is visible iff it is front-facing, projects inside the image at
    positive depth, and is not occluded: its depth may exceed the rasterized
    depth buffer of the mesh at its pixel by at most depth_tol (the buffer
    holds background-infinity where nothing projects, e.g. just outside a
    silhouette, which never marks a vertex occluded).
    """
    v = np.asarray(mesh_vertices, dtype=np.float64)
    n = np.asarray(normals, dtype=np.float64)
    vis = np.zeros((len(cams), len(v)), dtype=bool)
    for ci, cam in enumerate(cams):
        xy, depth = raster.project_points(cam, v)
        front = np.einsum("ij,ij->i", n, cam.center[None, :] - v) > 0.0
        ok = front & (depth > 0)
        # pixel containing the projection (centers at half-integers)
        px = np.floor(xy[:, 0]).astype(np.int64)
        py = np.floor(xy[:, 1]).astype(np.int64)
        inb = (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)
        ok &= inb
        idx = np.flatnonzero(ok)
        if idx.size:
            zbuf = raster.rasterize_depth(v, faces, cam)
            ok[idx] = depth[idx] <= zbuf[py[idx], px[idx]] + depth_tol
        vis[ci] = ok
    return vis


def visibility_for_mesh(mesh: Mesh, normals, cams, sigma_hat: float = DEFAULT_SIGMA_HAT, vertices=None) -> np.ndarray:
    verts = mesh.vertices if vertices is None else vertices
    return compute_visibility(verts, normals, mesh.faces, cams, VISIBILITY_DEPTH_TOL_FACTOR * sigma_hat)


def assign_colors(gaussians: SurfaceGaussians, images, cams, visibility) -> None:
    """Color each Gaussian from the camera that sees it best.

    images: list of (h, w, 3) uint8 arrays, one per camera, index-aligned
    with cams. visibility: (n_cams, n_vertices) mask over mesh vertices.
    The best camera maximizes normal-to-view alignment among cameras where
    the vertex is visible; the color is the average RGB inside the projected
    1-sigma disk, converted to HSV. Gaussians visible nowhere inherit the
    average color of colored mesh-neighbors (requires set_neighbor_fill).
    """
    n = len(gaussians)
    if n == 0:
        return
    means = gaussians.means()
    vis = np.asarray(visibility)[:, gaussians.vertex_ids]  # (n_cams, n)
    align = np.full((len(cams), n), -np.inf)
    for ci, cam in enumerate(cams):
        to_cam = cam.center[None, :] - means
        to_cam /= np.maximum(np.linalg.norm(to_cam, axis=1), 1e-12)[:, None]
        a = np.einsum("ij,ij->i", gaussians.normals, to_cam)
        align[ci] = np.where(vis[ci], a, -np.inf)
    best = np.argmax(align, axis=0)
    seen = np.isfinite(align[best, np.arange(n)])
    if not seen.any():
        raise GsRefineError("no surface Gaussian is visible in any camera; cannot assign colors")

    eta = gaussians.eta
    for i in np.flatnonzero(seen):
        cam = cams[best[i]]
        ph = cam.P @ np.append(means[i], 1.0)
        mu = ph[:2] / ph[2]
        sigma = gaussians.sigma_hat[i] * cam.f / ph[2]
        eta[i] = rgb_to_hsv(_disk_average(images[best[i]], mu, sigma))
    eta[~seen] = np.nan


def _disk_average(image: np.ndarray, mu, radius) -> np.ndarray:
    """Mean RGB (in [0,1]) over pixels whose centers lie within `radius` of
    mu; falls back to the pixel containing mu when the disk covers none."""
    h, w = image.shape[:2]
    cx, cy = float(mu[0]), float(mu[1])
    r = max(float(radius), 0.0)
    x0, x1 = max(int(np.floor(cx - r - 0.5)), 0), min(int(np.ceil(cx + r - 0.5)), w - 1)
    y0, y1 = max(int(np.floor(cy - r - 0.5)), 0), min(int(np.ceil(cy + r - 0.5)), h - 1)
    if x0 <= x1 and y0 <= y1:
        xs = np.arange(x0, x1 + 1) + 0.5
        ys = (np.arange(y0, y1 + 1) + 0.5)[:, None]
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        if mask.any():
            patch = image[y0 : y1 + 1, x0 : x1 + 1].astype(np.float64) / 255.0
            return patch[mask].mean(axis=0)
    px = min(max(int(np.floor(cx)), 0), w - 1)
    py = min(max(int(np.floor(cy)), 0), h - 1)
    return image[py, px].astype(np.float64) / 255.0


def fill_uncolored(gaussians: SurfaceGaussians, mesh: Mesh) -> None:
    """Propagate colors to Gaussians that no camera saw: each uncolored
    Gaussian takes the average color of its colored 1-ring neighbors,
    iterated until every Gaussian is colored (fixed point)."""
    n = len(gaussians)
    uncolored = np.isnan(gaussians.eta[:, 0])
    if not uncolored.any():
        return
    if uncolored.all():
        raise GsRefineError("no colored Gaussian to propagate from")
    gid_of_vertex = {int(v): i for i, v in enumerate(gaussians.vertex_ids)}
    neighbors = [[] for _ in range(n)]
    for a, b in mesh.edges():
        ga, gb = gid_of_vertex.get(int(a)), gid_of_vertex.get(int(b))
        if ga is not None and gb is not None:
            neighbors[ga].append(gb)
            neighbors[gb].append(ga)
    eta = gaussians.eta
    pending = set(np.flatnonzero(uncolored).tolist())
    while pending:
        filled = []
        for i in pending:
            ready = [j for j in neighbors[i] if not np.isnan(eta[j, 0])]
            if ready:
                eta[i] = _mean_hsv(eta[ready])
                filled.append(i)
        if not filled:
            raise GsRefineError(f"{len(pending)} Gaussians unreachable from any colored Gaussian")
        pending.difference_update(filled)


def _mean_hsv(colors: np.ndarray) -> np.ndarray:
    """Componentwise HSV mean with a circular mean for hue."""
    ang = colors[:, 0] * 2.0 * np.pi
    hx, hy = np.cos(ang).mean(), np.sin(ang).mean()
    hue = 0.0 if (hx * hx + hy * hy) < 1e-18 else (np.arctan2(hy, hx) / (2.0 * np.pi)) % 1.0
    return np.array([hue, colors[:, 1].mean(), colors[:, 2].mean()])
