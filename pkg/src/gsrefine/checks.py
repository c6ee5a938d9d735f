"""Randomized oracle suites: closed-form overlap vs quadrature, analytic
gradient vs finite differences, depth-buffer visibility vs ray casting, and
the regularizer identities.

These are the package's independent verification routes; the CLI `check`
subcommand runs them and the acceptance tests assert their outcomes at
fixed tolerances. Scene generators are seeded and fully deterministic.
"""

from __future__ import annotations

import numpy as np

from .energy import (
    EnergyParams,
    EnergyState,
    NeighborGraph,
    evaluate,
    gradient,
    pair_overlap,
    regularization_energy,
    regularization_gradient,
    wendland,
)
from .image_model import ImageGaussian, ImageGaussians, color_distance
from .surface_model import ProjectedGaussian, SurfaceGaussians, compute_visibility, project_gaussians
from .synth_bench import (
    finite_diff_gradient,
    make_camera_ring,
    quadrature_overlap,
    ray_cast_visibility,
)

GRAD_FLOOR = 1e-4  # components below this sit too close to stationary
                   # boundaries for h=1e-4 central differences to certify
SATURATION_MARGIN = 0.9
CULL_MARGIN = 1e-3


def check_overlap_closed_form(n_pairs: int = 1000, seed: int = 0):
    """Compare the closed-form color-weighted overlap against 2D quadrature
    of the Gaussian product on randomized (sigma, mu, color) pairs.

    Returns (max relative error, pairs compared). Culling is disabled: the
    criterion targets the closed form itself.
    """
    rng = np.random.default_rng(seed)
    params = EnergyParams(cull_factor=1e9)
    worst = 0.0
    for _ in range(n_pairs):
        sig_s, sig_i = rng.uniform(0.5, 50.0, size=2)
        mu_s = rng.uniform(0.0, 1000.0, size=2)
        ang = rng.uniform(0.0, 2.0 * np.pi)
        r = rng.uniform(0.0, 5.0) * max(sig_s, sig_i)
        mu_i = mu_s + r * np.array([np.cos(ang), np.sin(ang)])
        eta_s = rng.uniform(0.0, 1.0, size=3)
        eta_i = np.clip(eta_s + rng.normal(0.0, 0.02, size=3), 0.0, 1.0)

        proj = ProjectedGaussian(mu=mu_s, sigma=sig_s, depth=1.0, vertex_id=0, cam_id=0)
        img = ImageGaussian(mu=mu_i, sigma=sig_i, eta=eta_i, cam_id=0, depth=0)
        dist = color_distance(eta_s, eta_i)
        closed = pair_overlap(proj, img, dist, params)
        oracle = wendland(dist, params.delta_color) * quadrature_overlap(mu_i, sig_i, mu_s, sig_s)
        if oracle == 0.0 and closed == 0.0:
            continue
        worst = max(worst, abs(closed - oracle) / max(abs(oracle), 1e-300))
    return worst, n_pairs


def _random_energy_scene(rng, max_gaussians=10, max_cams=3, max_image_gaussians=20):
    """One random small scene for gradient verification.

    Configurations are drawn until they sit safely away from the energy's
    non-smooth boundaries: no image Gaussian near its saturation bound, no
    pair near the distance cull, and no gradient component small enough for
    finite differences at h=1e-4 to be dominated by roundoff.
    """
    n_s = int(rng.integers(3, max_gaussians + 1))
    n_c = int(rng.integers(1, max_cams + 1))
    params = EnergyParams(w_reg=float(rng.uniform(0.2, 2.0)))

    cams = make_camera_ring(
        max(n_c, 2),
        target=(0.0, 0.0, 0.0),
        ring_radius=1500.0,
        height=900.0,
        image_size=(240, 240),
        span_mm=700.0,
        start_angle=float(rng.uniform(0.0, 2.0 * np.pi)),
    )[:n_c]

    mu = rng.uniform(-150.0, 150.0, size=(n_s, 3))
    normals = rng.normal(size=(n_s, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    gaussians = SurfaceGaussians(
        vertex_ids=np.arange(n_s),
        mu_orig=mu,
        normals=normals,
        sigma_hat=rng.uniform(4.0, 10.0, size=n_s),
        eta=rng.uniform(0.0, 1.0, size=(n_s, 3)),
        k=rng.uniform(-1.0, 1.0, size=n_s),
    )

    images = []
    for cam in cams:
        m = int(rng.integers(4, max_image_gaussians + 1))
        mu_p, sig_p, _ = project_gaussians(cam, gaussians.means(), gaussians.sigma_hat)
        mus, sigmas, etas = [], [], []
        for _ in range(m):
            s = int(rng.integers(0, n_s))
            ang = rng.uniform(0.0, 2.0 * np.pi)
            off = rng.uniform(0.0, 1.5) * sig_p[s]
            mus.append(mu_p[s] + off * np.array([np.cos(ang), np.sin(ang)]))
            sigmas.append(float(rng.uniform(0.6, 1.8) * sig_p[s]))
            etas.append(np.clip(gaussians.eta[s] + rng.normal(0.0, 0.01, size=3), 0.0, 1.0))
        images.append(ImageGaussians(mu=mus, sigma=sigmas, eta=etas, depth=[0] * m, cam_id=cam.cam_id))

    graph = _random_neighbor_graph(rng, n_s, params)
    state = EnergyState(
        gaussians=gaussians,
        cams=cams,
        images=images,
        visibility=np.ones((n_c, n_s), dtype=bool),
        graph=graph,
    )
    return state, params


def _random_neighbor_graph(rng, n, params):
    pairs = set()
    for _ in range(int(rng.integers(0, 2 * n))):
        a, b = rng.integers(0, n, size=2)
        if a != b:
            pairs.add((min(int(a), int(b)), max(int(a), int(b))))
    indptr = [0]
    indices, weights = [], []
    w1 = wendland(1.0, params.delta_geo)
    adjacency = [[] for _ in range(n)]
    for a, b in sorted(pairs):
        adjacency[a].append(b)
        adjacency[b].append(a)
    for s in range(n):
        for j in sorted(adjacency[s]):
            indices.append(j)
            weights.append(w1)
        indptr.append(len(indices))
    return NeighborGraph(np.array(indptr), np.array(indices, dtype=np.int64), np.array(weights))


def _near_boundary(state, params, cache) -> bool:
    for ci, cd in enumerate(cache.cam_data):
        if (cd["sums"] > SATURATION_MARGIN * cd["eii"]).any():
            return True
        # exhaustive pair check against the cull boundary
        imgs = state.images[ci]
        mu_p, sig_p = cd["mu_p"], cd["sig_p"]
        if len(mu_p) == 0 or len(imgs) == 0:
            continue
        d2 = ((imgs.mu[:, None, :] - mu_p[None, :, :]) ** 2).sum(axis=2)
        S = sig_p[None, :] ** 2 + imgs.sigma[:, None] ** 2
        bound = params.cull_factor**2 * S
        if (np.abs(d2 - bound) < CULL_MARGIN * bound).any():
            return True
    return False


def check_gradient_fd(n_scenes: int = 100, seed: int = 0, h: float = 1e-4):
    """Analytic gradient vs central finite differences on random scenes.

    Returns (max relative error over compared components, scenes used).
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < n_scenes:
        state, params = _random_energy_scene(rng)
        _, cache = evaluate(state, params)
        if _near_boundary(state, params, cache):
            continue
        g_an = gradient(state, params, cache)
        if (np.abs(g_an) < GRAD_FLOOR).any():
            continue
        g_fd = finite_diff_gradient(state, params, h)
        compare = np.abs(g_an) > 1e-10
        rel = np.abs(g_an[compare] - g_fd[compare]) / np.abs(g_fd[compare])
        worst = max(worst, float(rel.max()))
        done += 1
    return worst, done


def check_regularizer(n_graphs: int = 50, seed: int = 0, h: float = 0.5):
    """Regularizer identities on random graphs.

    Returns (max |E_reg| on component-constant k, min E_reg on perturbed k,
    max relative gradient error vs finite differences). E_reg is quadratic
    in k, so central differences carry no truncation error at any h; the
    large default h just minimizes roundoff.
    """
    rng = np.random.default_rng(seed)
    params = EnergyParams()
    max_zero = 0.0
    min_perturbed = np.inf
    worst_grad = 0.0
    for _ in range(n_graphs):
        n = int(rng.integers(2, 30))
        graph = _random_neighbor_graph(rng, n, params)
        labels = _components(graph, n)
        k = rng.uniform(-5.0, 5.0, size=int(labels.max()) + 1)[labels]
        max_zero = max(max_zero, abs(regularization_energy(k, graph)))

        if len(graph.indices):
            k2 = k.copy()
            edge = int(rng.integers(0, len(graph.indices)))
            k2[graph.rows[edge]] += 1.0 + rng.uniform(0.0, 1.0)
            min_perturbed = min(min_perturbed, regularization_energy(k2, graph))

            k3 = rng.uniform(-5.0, 5.0, size=n)
            g_an = regularization_gradient(k3, graph)
            g_fd = np.zeros(n)
            for s in range(n):
                orig = k3[s]
                k3[s] = orig + h
                ep = regularization_energy(k3, graph)
                k3[s] = orig - h
                em = regularization_energy(k3, graph)
                k3[s] = orig
                g_fd[s] = (ep - em) / (2.0 * h)
            denom = np.maximum(np.abs(g_fd), 1e-12)
            worst_grad = max(worst_grad, float(np.max(np.abs(g_an - g_fd) / denom)))
    return max_zero, min_perturbed, worst_grad


def _components(graph: NeighborGraph, n: int) -> np.ndarray:
    labels = np.full(n, -1, dtype=np.int64)
    nxt = 0
    for s in range(n):
        if labels[s] >= 0:
            continue
        stack = [s]
        labels[s] = nxt
        while stack:
            u = stack.pop()
            for j in graph.indices[graph.indptr[u] : graph.indptr[u + 1]]:
                if labels[j] < 0 and graph.weights is not None:
                    labels[j] = nxt
                    stack.append(int(j))
        nxt += 1
    return labels


def make_visibility_scene(rng, max_triangles: int = 100, image_size=(320, 320)):
    """Random layered triangle soup posed for unambiguous visibility.

    Triangles live on well-separated parallel planes; a deterministic
    post-pass nudges or drops triangles whose projected edges pass within a
    couple of pixels of another triangle's vertex, because visibility at a
    silhouette is genuinely ill-posed for any discretized method.
    """
    n_layers = int(rng.integers(2, 4))
    layer_z = 200.0 + 90.0 * np.arange(n_layers)
    cell = 220.0
    grid = 4
    tris = []
    for li in range(n_layers):
        occupied = rng.random(size=(grid, grid)) < 0.45
        for gi in range(grid):
            for gj in range(grid):
                if not occupied[gi, gj] or len(tris) >= max_triangles // 1:
                    continue
                tris.append(_cell_triangle(rng, gi, gj, grid, cell, layer_z[li]))
    tris = tris[:max_triangles]

    n_cams = int(rng.integers(2, 5))
    cams = make_camera_ring(
        n_cams,
        target=(0.0, 0.0, float(layer_z.mean())),
        ring_radius=600.0,
        height=2200.0,
        image_size=image_size,
        span_mm=cell * grid * 1.35,
        start_angle=float(rng.uniform(0.0, 2.0 * np.pi)),
    )

    for _ in range(30):
        bad = _silhouette_conflicts(tris, cams)
        if not bad:
            break
        for ti in sorted(bad, reverse=True):
            replacement = _nudge_triangle(rng, tris[ti], cell)
            if replacement is None:
                del tris[ti]
            else:
                tris[ti] = replacement
    else:
        tris = [t for i, t in enumerate(tris) if i not in _silhouette_conflicts(tris, cams)]

    vertices = np.concatenate([t["verts"] for t in tris]) if tris else np.zeros((0, 3))
    faces = np.arange(len(vertices), dtype=np.int64).reshape(-1, 3)
    normals = np.concatenate([np.tile(t["normal"], (3, 1)) for t in tris]) if tris else np.zeros((0, 3))
    return vertices, normals, faces, cams


def _cell_triangle(rng, gi, gj, grid, cell, z):
    cx = (gi - (grid - 1) / 2.0) * cell + rng.uniform(-0.15, 0.15) * cell
    cy = (gj - (grid - 1) / 2.0) * cell + rng.uniform(-0.15, 0.15) * cell
    radius = rng.uniform(0.28, 0.4) * cell
    ang0 = rng.uniform(0.0, 2.0 * np.pi)
    angs = ang0 + np.array([0.0, 2.2, 4.3]) + rng.uniform(-0.15, 0.15, size=3)
    verts = np.stack([cx + radius * np.cos(angs), cy + radius * np.sin(angs), np.full(3, z)], axis=1)
    flip = rng.random() < 0.25  # some back-facing triangles
    if flip:
        verts = verts[::-1].copy()
    a, b, c = verts
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    return {"verts": verts, "normal": n, "cell": (cx, cy, z, cell)}


def _nudge_triangle(rng, tri, cell):
    tri = dict(tri)
    if rng.random() < 0.3:
        return None
    shift = rng.uniform(-0.12, 0.12, size=2) * cell
    verts = tri["verts"].copy()
    verts[:, 0] += shift[0]
    verts[:, 1] += shift[1]
    tri["verts"] = verts
    return tri


def _silhouette_conflicts(tris, cams, margin_px: float = 2.5):
    """Indices of triangles whose projected edges pass within margin_px of
    some other triangle's projected vertex in any camera."""
    if not tris:
        return set()
    verts = np.concatenate([t["verts"] for t in tris])
    owner = np.repeat(np.arange(len(tris)), 3)
    bad = set()
    from . import raster

    for cam in cams:
        xy, _ = raster.project_points(cam, verts)
        w, h = cam.image_size
        out = (xy[:, 0] < 3) | (xy[:, 0] > w - 4) | (xy[:, 1] < 3) | (xy[:, 1] > h - 4)
        bad.update(np.unique(owner[out]).tolist())
        tri_xy = xy.reshape(-1, 3, 2)
        for ti in range(len(tris)):
            a, b, c = tri_xy[ti]
            others = owner != ti
            for p0, p1 in ((a, b), (b, c), (c, a)):
                d = _point_segment_distance(xy[others], p0, p1)
                if (d < margin_px).any():
                    bad.add(ti)
                    break
    return bad


def _point_segment_distance(pts, p0, p1):
    seg = p1 - p0
    ll = float(seg @ seg)
    if ll == 0.0:
        return np.linalg.norm(pts - p0, axis=1)
    t = np.clip(((pts - p0) @ seg) / ll, 0.0, 1.0)
    proj = p0 + t[:, None] * seg
    return np.linalg.norm(pts - proj, axis=1)


def check_visibility_oracle(n_scenes: int = 20, seed: int = 0, depth_tol: float = 14.0):
    """Depth-buffer visibility vs ray casting; returns (mismatches, total)."""
    rng = np.random.default_rng(seed)
    mismatches = 0
    total = 0
    for _ in range(n_scenes):
        vertices, normals, faces, cams = make_visibility_scene(rng)
        if len(faces) == 0:
            continue
        buf = compute_visibility(vertices, normals, faces, cams, depth_tol)
        ray = ray_cast_visibility(vertices, normals, faces, cams)
        mismatches += int((buf != ray).sum())
        total += buf.size
    return mismatches, total


def run_all(quick: bool = False, seed: int = 0):
    """Run every oracle suite; returns [(name, passed, detail), ...]."""
    scale = 10 if quick else 1
    results = []

    worst, n = check_overlap_closed_form(n_pairs=1000 // scale, seed=seed)
    results.append(
        ("overlap closed form vs quadrature", worst <= 1e-4, f"max rel err {worst:.3e} over {n} pairs")
    )

    worst, n = check_gradient_fd(n_scenes=100 // scale, seed=seed)
    results.append(
        ("analytic gradient vs finite differences", worst <= 1e-5, f"max rel err {worst:.3e} over {n} scenes")
    )

    max_zero, min_pert, worst_grad = check_regularizer(n_graphs=50 // scale, seed=seed)
    ok = max_zero == 0.0 and (min_pert > 0.0) and worst_grad <= 1e-8
    results.append(
        (
            "regularizer identities",
            ok,
            f"constant-k E_reg {max_zero:.1e}, perturbed min {min_pert:.3e}, grad rel err {worst_grad:.3e}",
        )
    )

    mism, total = check_visibility_oracle(n_scenes=20 // scale or 2, seed=seed)
    results.append(
        ("depth-buffer visibility vs ray cast", mism == 0, f"{total - mism}/{total} vertices agree")
    )
    return results
