"""Synthetic registered CT/MR phantoms with known ground truth.

Randomness comes from ``numpy.random.default_rng(seed)`` (PCG64), so a given
argument tuple produces the same bytes on every platform numpy supports.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .volume import LabelMask, ModalityPair, Volume

# voxel spacing of the generated grid, mm; thick slices along the last axis
DEFAULT_SPACING = (1.0, 1.0, 3.0)

# CT: sharp per-class levels, background first
CT_LEVELS = (0.40, 0.62, 0.78, 0.30, 0.52, 0.70)
CT_NOISE = 0.06
MR_NOISE = 0.04


class GenerationError(ValueError):
    pass


def _blob(shape, center, radii, angle, wobble, rng):
    """Boolean mask of a rotated ellipsoid with a low-frequency radial wobble."""
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    x, y, z = (g - c for g, c in zip(grids, center))
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * x + sa * y) / radii[0]
    v = (-sa * x + ca * y) / radii[1]
    w = z / radii[2]
    r = np.sqrt(u * u + v * v + w * w)
    theta = np.arctan2(v, u)
    phi = np.arctan2(w, np.sqrt(u * u + v * v) + 1e-12)
    k1, k2 = rng.integers(2, 4, size=2)
    p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
    bumpy = 1.0 + wobble * (np.sin(k1 * theta + p1) * 0.6 + np.sin(k2 * phi + p2) * 0.4)
    return r < bumpy


def _bias_field(shape, rng, strength=0.35):
    """Smooth multiplicative field in [1 - strength, 1 + strength]."""
    coarse = rng.standard_normal((3, 3, 2))
    field = ndimage.zoom(coarse, [n / c for n, c in zip(shape, coarse.shape)], order=3,
                         mode="nearest", grid_mode=True)[: shape[0], : shape[1], : shape[2]]
    field = field - field.mean()
    m = np.abs(field).max()
    if m > 0:
        field = field / m
    return 1.0 + strength * field


def _normalize(a):
    lo, hi = float(a.min()), float(a.max())
    if hi - lo < 1e-12:
        return np.zeros_like(a, dtype=np.float32)
    return ((a - lo) / (hi - lo)).astype(np.float32)


def synth_pair(seed, dims=(64, 64, 16), n_objects=2, num_classes=2, case_id=None,
               spacing=DEFAULT_SPACING) -> ModalityPair:
    """Generate one registered CT/MR pair with ground truth.

    Objects are placed in index space with in-plane radii of 8-16% of the
    in-plane extent and through-plane radii of 15-30% of the slice count.
    Object ``k`` takes class ``1 + k % (num_classes - 1)``.
    """
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 8:
        raise GenerationError(f"every dim must be >= 8, got {dims}")
    if not 1 <= n_objects <= 5:
        raise GenerationError(f"n_objects must be in [1, 5], got {n_objects}")
    if not 2 <= num_classes <= len(CT_LEVELS):
        raise GenerationError(f"num_classes must be in [2, {len(CT_LEVELS)}]")
    rng = np.random.default_rng(seed)

    gt = np.zeros(dims, dtype=np.uint8)
    for k in range(n_objects):
        radii = np.array([
            rng.uniform(0.08, 0.16) * dims[0],
            rng.uniform(0.08, 0.16) * dims[1],
            rng.uniform(0.15, 0.30) * dims[2],
        ])
        radii = np.maximum(radii, 2.0)
        lo = np.ceil(radii * 1.2)
        hi = np.array(dims) - 1 - lo
        if np.any(hi < lo):
            raise GenerationError(f"dims {dims} too small to place an object of radii {radii.round(1)}")
        center = rng.uniform(lo, hi)
        angle = rng.uniform(0, np.pi)
        mask = _blob(dims, center, radii, angle, wobble=0.18, rng=rng)
        gt[mask] = 1 + k % (num_classes - 1)

    levels = np.asarray(CT_LEVELS[:num_classes])
    ct = levels[gt] + CT_NOISE * rng.standard_normal(dims)

    # MR: smooth monotone response to a blurred class indicator, per-class gain
    soft = np.zeros(dims)
    gains = np.linspace(1.0, 0.6, num_classes - 1) if num_classes > 2 else np.array([1.0])
    for c in range(1, num_classes):
        soft += gains[c - 1] * ndimage.gaussian_filter((gt == c).astype(np.float64), sigma=(1.2, 1.2, 0.6))
    mr = 0.25 + 0.6 * np.tanh(2.0 * soft)
    mr = mr * _bias_field(dims, rng) + MR_NOISE * rng.standard_normal(dims)

    cid = case_id if case_id is not None else f"synth_{seed:05d}"
    return ModalityPair(
        ct=Volume(_normalize(ct), spacing),
        mr=Volume(_normalize(mr), spacing),
        gt=LabelMask(gt, num_classes, spacing),
        case_id=cid,
    )
