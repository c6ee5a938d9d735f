"""2D image Gaussians from quad-tree decomposition of each input frame.

Each camera image is recursively split into square patches until the patch
color is coherent (per-channel RGB standard deviation below a threshold),
the maximum depth is reached, or the patch hits the minimum side length.
One isotropic 2D Gaussian per leaf: mean at the patch center, standard
deviation half the side length, color the average patch color in HSV.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class QuadTreeParams:
    max_depth: int = 8
    split_threshold: float = 0.04  # max per-channel RGB std, normalized units
    min_patch_side: int = 2

    def __post_init__(self):
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.split_threshold < 0:
            raise ValueError("split_threshold must be >= 0")
        if self.min_patch_side < 1:
            raise ValueError("min_patch_side must be >= 1")


@dataclass(frozen=True)
class ImageGaussian:
    """One color-coherent square patch: center mu (px), sigma = side/2 (px),
    average color eta in HSV with all components in [0, 1]."""

    mu: np.ndarray
    sigma: float
    eta: np.ndarray
    cam_id: int
    depth: int


class ImageGaussians:
    """Struct-of-arrays container for one camera's image Gaussians."""

    def __init__(self, mu, sigma, eta, depth, cam_id=0):
        self.mu = np.ascontiguousarray(np.asarray(mu, dtype=np.float64)).reshape(-1, 2)
        self.sigma = np.ascontiguousarray(np.asarray(sigma, dtype=np.float64)).reshape(-1)
        self.eta = np.ascontiguousarray(np.asarray(eta, dtype=np.float64)).reshape(-1, 3)
        self.depth = np.ascontiguousarray(np.asarray(depth, dtype=np.int64)).reshape(-1)
        self.cam_id = int(cam_id)
        n = len(self.sigma)
        if not (len(self.mu) == len(self.eta) == len(self.depth) == n):
            raise ValueError("field lengths disagree")

    def __len__(self):
        return len(self.sigma)

    def __getitem__(self, i) -> ImageGaussian:
        return ImageGaussian(
            mu=self.mu[i].copy(),
            sigma=float(self.sigma[i]),
            eta=self.eta[i].copy(),
            cam_id=self.cam_id,
            depth=int(self.depth[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @staticmethod
    def from_list(gaussians, cam_id=None):
        if cam_id is None:
            cam_id = gaussians[0].cam_id if gaussians else 0
        return ImageGaussians(
            mu=[g.mu for g in gaussians],
            sigma=[g.sigma for g in gaussians],
            eta=[g.eta for g in gaussians],
            depth=[g.depth for g in gaussians],
            cam_id=cam_id,
        )


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Standard HSV with hue scaled to [0, 1]; achromatic inputs get hue 0.

    Accepts a single (3,) triple or an (..., 3) array, components in [0, 1].
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    single = rgb.ndim == 1
    arr = np.atleast_2d(rgb)
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    maxc = np.max(arr, axis=-1)
    minc = np.min(arr, axis=-1)
    delta = maxc - minc
    chromatic = delta > 0

    h = np.zeros_like(maxc)
    safe = np.where(chromatic, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, h)
    h = np.where((maxc == g) & (maxc != r), 2.0 + rc - bc, h)
    h = np.where((maxc == b) & (maxc != r) & (maxc != g), 4.0 + gc - rc, h)
    h = np.where(chromatic, (h / 6.0) % 1.0, 0.0)

    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    out = np.stack([h, s, maxc], axis=-1)
    return out[0] if single else out.reshape(rgb.shape)


def color_distance(a, b, circular_hue: bool = True) -> float:
    """Euclidean distance between HSV triples.

    Hue is treated as circular by default (wraparound distance on [0, 1));
    pass circular_hue=False for a plain componentwise difference.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dh = np.abs(a[..., 0] - b[..., 0])
    if circular_hue:
        dh = np.minimum(dh, 1.0 - dh)
    ds = a[..., 1] - b[..., 1]
    dv = a[..., 2] - b[..., 2]
    return np.sqrt(dh * dh + ds * ds + dv * dv)


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def decompose_image(image: np.ndarray, params: QuadTreeParams = QuadTreeParams(), cam_id: int = 0) -> ImageGaussians:
    """Quad-tree decomposition of an image into 2D image Gaussians.

    Non-power-of-two images are padded (conceptually) to the next power of
    two; leaves fully inside the padding are discarded, leaves straddling it
    keep the geometric center/sigma of the full square but average color only
    over real pixels. Leaves are emitted in Morton (z-curve) order, so the
    output is deterministic for a given image and parameter set.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("expected a non-empty (h, w, 3) image")
    if img.dtype == np.uint8:
        norm = img.astype(np.float64) / 255.0
    else:
        norm = img.astype(np.float64)
    h, w = norm.shape[:2]
    side = _next_pow2(max(h, w))

    # Summed-area tables give O(1) mean/std per patch over the real region.
    pad = np.zeros((h + 1, w + 1, 3), dtype=np.float64)
    pad[1:, 1:] = norm
    sat = pad.cumsum(axis=0).cumsum(axis=1)
    pad2 = np.zeros((h + 1, w + 1, 3), dtype=np.float64)
    pad2[1:, 1:] = norm * norm
    sat2 = pad2.cumsum(axis=0).cumsum(axis=1)

    def region_stats(x0, y0, s):
        """Mean RGB and max per-channel std over the patch clipped to the image."""
        x1, y1 = min(x0 + s, w), min(y0 + s, h)
        if x0 >= w or y0 >= h:
            return None, 0.0, 0
        area = (x1 - x0) * (y1 - y0)
        tot = sat[y1, x1] - sat[y0, x1] - sat[y1, x0] + sat[y0, x0]
        tot2 = sat2[y1, x1] - sat2[y0, x1] - sat2[y1, x0] + sat2[y0, x0]
        mean = tot / area
        var = np.maximum(tot2 / area - mean * mean, 0.0)
        return mean, float(np.sqrt(var.max())), area

    mus, sigmas, etas, depths = [], [], [], []

    def recurse(x0, y0, s, depth):
        mean, std, area = region_stats(x0, y0, s)
        if area == 0:
            return  # fully inside padding
        if std <= params.split_threshold or depth >= params.max_depth or s // 2 < params.min_patch_side:
            mus.append((x0 + s / 2.0, y0 + s / 2.0))
            sigmas.append(s / 2.0)
            etas.append(rgb_to_hsv(mean))
            depths.append(depth)
            return
        half = s // 2
        # Morton order: (0,0), (1,0), (0,1), (1,1)
        recurse(x0, y0, half, depth + 1)
        recurse(x0 + half, y0, half, depth + 1)
        recurse(x0, y0 + half, half, depth + 1)
        recurse(x0 + half, y0 + half, half, depth + 1)

    recurse(0, 0, side, 0)
    return ImageGaussians(mu=mus, sigma=sigmas, eta=etas, depth=depths, cam_id=cam_id)


def dump_gaussians(gaussians: ImageGaussians, fh) -> None:
    """Write the `cam mu_x mu_y sigma h s v depth` text form."""
    fh.write("# cam mu_x mu_y sigma h s v depth\n")
    for i in range(len(gaussians)):
        mu = gaussians.mu[i]
        eta = gaussians.eta[i]
        fh.write(
            f"{gaussians.cam_id} {mu[0]:.6f} {mu[1]:.6f} {gaussians.sigma[i]:.6f} "
            f"{eta[0]:.6f} {eta[1]:.6f} {eta[2]:.6f} {gaussians.depth[i]}\n"
        )


def patch_overlay(image: np.ndarray, gaussians: ImageGaussians) -> np.ndarray:
    """Diagnostic rendering: input image with leaf patch boundaries drawn."""
    out = np.asarray(image, dtype=np.uint8).copy()
    h, w = out.shape[:2]
    for i in range(len(gaussians)):
        cx, cy = gaussians.mu[i]
        s = gaussians.sigma[i]
        x0, y0 = int(round(cx - s)), int(round(cy - s))
        x1, y1 = int(round(cx + s)), int(round(cy + s))
        x0c, x1c = max(x0, 0), min(x1, w)
        y0c, y1c = max(y0, 0), min(y1, h)
        if y0 >= 0 and y0 < h:
            out[y0, x0c:x1c] = (255, 0, 0)
        if x0 >= 0 and x0 < w:
            out[y0c:y1c, x0] = (255, 0, 0)
    return out
