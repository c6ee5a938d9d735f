"""Pure numpy/scipy implementation of the pair-accumulation kernels.

Semantics match the compiled core bit-for-bit in structure (same pair set,
same formulas); only summation order may differ, so the two backends agree
to floating-point roundoff, not bitwise. Each backend on its own is fully
deterministic.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

TWO_PI = 2.0 * np.pi
FOUR_PI = 4.0 * np.pi


def wendland(delta, support):
    """Compactly supported falloff: (1 - d/D)^4 (4 d/D + 1) below D, else 0."""
    d = np.asarray(delta, dtype=np.float64)
    x = d / support
    out = np.where(x < 1.0, (1.0 - np.minimum(x, 1.0)) ** 4 * (4.0 * x + 1.0), 0.0)
    return out if out.ndim else float(out)


def color_deltas(eta_a, eta_b, circular_hue):
    dh = np.abs(eta_a[:, 0] - eta_b[:, 0])
    if circular_hue:
        dh = np.minimum(dh, 1.0 - dh)
    ds = eta_a[:, 1] - eta_b[:, 1]
    dv = eta_a[:, 2] - eta_b[:, 2]
    return np.sqrt(dh * dh + ds * ds + dv * dv)


def find_pairs(mu_s, sig_s, eta_s, mu_i, sig_i, eta_i, cull_factor, delta_color, circular_hue):
    """Candidate pairs between projected surface Gaussians and image Gaussians.

    Returns (pair_i, pair_s, pair_T, pair_E, sums, n_candidates):
    pairs passing the distance cull with nonzero color weight, the per-image-
    Gaussian pre-clamp overlap sums, and the count of distance-culled
    survivors (including zero-weight ones).
    """
    ns, m = len(sig_s), len(sig_i)
    empty = (np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0), np.empty(0))
    if ns == 0 or m == 0:
        return (*empty, np.zeros(m), 0)

    cand_i, cand_s = [], []
    # Bucket image Gaussians by sigma octave so one conservative KD-tree
    # radius per bucket stays tight.
    keys = np.ceil(np.log2(np.maximum(sig_i, 1e-300))).astype(np.int64)
    for key in np.unique(keys):
        members = np.flatnonzero(keys == key)
        smax = sig_i[members].max()
        tree = cKDTree(mu_i[members])
        radii = cull_factor * np.sqrt(sig_s * sig_s + smax * smax)
        hits = tree.query_ball_point(mu_s, radii, return_sorted=True)
        counts = np.fromiter((len(h) for h in hits), dtype=np.int64, count=ns)
        if counts.sum() == 0:
            continue
        flat = np.concatenate([np.asarray(h, dtype=np.int64) for h in hits if h])
        cand_i.append(members[flat])
        cand_s.append(np.repeat(np.arange(ns, dtype=np.int64), counts))
    if not cand_i:
        return (*empty, np.zeros(m), 0)
    ci = np.concatenate(cand_i)
    cs = np.concatenate(cand_s)

    diff = mu_i[ci] - mu_s[cs]
    d2 = np.einsum("ij,ij->i", diff, diff)
    svar = sig_s[cs] ** 2
    ivar = sig_i[ci] ** 2
    S = svar + ivar
    keep = d2 <= cull_factor * cull_factor * S
    n_candidates = int(keep.sum())
    ci, cs, d2, S, svar, ivar = ci[keep], cs[keep], d2[keep], S[keep], svar[keep], ivar[keep]

    T = wendland(color_deltas(eta_s[cs], eta_i[ci], circular_hue), delta_color)
    nz = T > 0.0
    ci, cs, T = ci[nz], cs[nz], T[nz]
    E = T * TWO_PI * (svar[nz] * ivar[nz] / S[nz]) * np.exp(-d2[nz] / (2.0 * S[nz]))

    sums = np.zeros(m)
    np.add.at(sums, ci, E)
    return ci, cs, T, E, sums, n_candidates


def grad_scatter(pair_i, pair_s, pair_T, unsaturated, mu_s, sig_s, depth_s, pnz_s, dmu_s, mu_i, sig_i, eii):
    """Per-surface-Gaussian similarity gradient contributions for one camera.

    Sums d(E_is)/dk / E_ii over pairs whose image Gaussian is below its
    saturation bound; saturated image Gaussians contribute exactly zero.
    """
    ns = len(sig_s)
    grad = np.zeros(ns)
    if len(pair_i) == 0:
        return grad
    mask = np.asarray(unsaturated, dtype=bool)[pair_i]
    if not mask.any():
        return grad
    i = pair_i[mask]
    s = pair_s[mask]
    T = pair_T[mask]

    diff = mu_i[i] - mu_s[s]
    d2 = np.einsum("ij,ij->i", diff, diff)
    svar = sig_s[s] ** 2
    S = svar + sig_i[i] ** 2
    B = (svar * sig_i[i] ** 2 / S) * np.exp(-d2 / (2.0 * S))
    bracket = (pnz_s[s] / depth_s[s]) * (-1.0 + svar / S - d2 * svar / (2.0 * S * S))
    bracket += np.einsum("ij,ij->i", diff, dmu_s[s]) / (2.0 * S)
    dE = T * FOUR_PI * B * bracket
    np.add.at(grad, s, dE / eii[i])
    return grad
