"""Minimal software rasterizer: perspective projection with z-buffering.

Shared by visibility computation (depth buffers of the current mesh) and the
synthetic benchmark renderer. Pixel (ix, iy) covers the unit square
[ix, ix+1) x [iy, iy+1) and samples at its center (ix+0.5, iy+0.5); a
quad-tree patch center in continuous coordinates is then exactly the
centroid of its pixels' sample points. Depth is the z-coordinate of
P @ [x y z 1], positive in front of the camera. Faces crossing the near
plane are skipped rather than clipped, which is sufficient for the scenes
this package generates.
"""

from __future__ import annotations

import numpy as np

NEAR_EPS = 1e-9


def project_points(cam, points: np.ndarray):
    """Project (n, 3) world points; returns ((n, 2) pixel xy, (n,) depth)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ph = cam.P[:, :3] @ pts.T + cam.P[:, 3:4]
    depth = np.ascontiguousarray(ph[2])
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = np.ascontiguousarray((ph[:2] / depth).T)
    return xy, depth


def rasterize_buffers(vertices, faces, cam, attrs=None, background=np.inf):
    """Z-buffered rasterization.

    attrs: optional (n_vertices, k) per-vertex attributes, interpolated
    perspective-correctly. Returns (depth (h, w), attr_buf (h, w, k) or None).
    Uncovered pixels hold `background` depth and zero attributes.
    """
    w, h = cam.image_size
    depth_buf = np.full((h, w), background, dtype=np.float64)
    attr_buf = None
    if attrs is not None:
        attrs = np.asarray(attrs, dtype=np.float64)
        if attrs.ndim == 1:
            attrs = attrs[:, None]
        attr_buf = np.zeros((h, w, attrs.shape[1]), dtype=np.float64)

    xy, z = project_points(cam, vertices)
    faces = np.asarray(faces, dtype=np.int64)

    for face in faces:
        za, zb, zc = z[face]
        if za <= NEAR_EPS or zb <= NEAR_EPS or zc <= NEAR_EPS:
            continue
        pa, pb, pc = xy[face]
        denom = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0])
        if abs(denom) < 1e-12:
            continue
        # pixels whose centers (ix+0.5, iy+0.5) fall inside the bbox
        x0 = max(int(np.ceil(min(pa[0], pb[0], pc[0]) - 0.5)), 0)
        x1 = min(int(np.floor(max(pa[0], pb[0], pc[0]) - 0.5)), w - 1)
        y0 = max(int(np.ceil(min(pa[1], pb[1], pc[1]) - 0.5)), 0)
        y1 = min(int(np.floor(max(pa[1], pb[1], pc[1]) - 0.5)), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        xs = np.arange(x0, x1 + 1, dtype=np.float64) + 0.5
        ys = (np.arange(y0, y1 + 1, dtype=np.float64) + 0.5)[:, None]

        la = ((pb[0] - xs) * (pc[1] - ys) - (pb[1] - ys) * (pc[0] - xs)) / denom
        lb = ((pc[0] - xs) * (pa[1] - ys) - (pc[1] - ys) * (pa[0] - xs)) / denom
        lc = 1.0 - la - lb
        inside = (la >= 0.0) & (lb >= 0.0) & (lc >= 0.0)
        if not inside.any():
            continue

        inv_z = la / za + lb / zb + lc / zc
        z_px = 1.0 / inv_z
        rows, cols = np.nonzero(inside)
        zv = z_px[rows, cols]
        closer = zv < depth_buf[rows + y0, cols + x0]
        if not closer.any():
            continue
        rows, cols, zv = rows[closer], cols[closer], zv[closer]
        depth_buf[rows + y0, cols + x0] = zv
        if attr_buf is not None:
            ia, ib, ic = face
            num = (
                la[rows, cols, None] / za * attrs[ia]
                + lb[rows, cols, None] / zb * attrs[ib]
                + lc[rows, cols, None] / zc * attrs[ic]
            )
            attr_buf[rows + y0, cols + x0] = num * zv[:, None]
    return depth_buf, attr_buf


def rasterize_depth(vertices, faces, cam) -> np.ndarray:
    depth, _ = rasterize_buffers(vertices, faces, cam)
    return depth
