"""Brute-force reference computations for the test suite.

Nothing here is imported by the production modules, and nothing here
imports them: each function re-derives its quantity from the definition
with explicit loops.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MAX_CRF_SIDE = 16
MAX_ASD_SIDE = 16


class OracleSizeError(ValueError):
    pass


def _kernel_params(k):
    if isinstance(k, dict):
        return (float(k.get("weight", 1.0)), k.get("kind", "bilateral"),
                float(k.get("sigma_spatial", 5.0)), float(k.get("sigma_intensity", 0.1)))
    return float(k.weight), k.kind, float(k.sigma_spatial), float(k.sigma_intensity)


def crf_bruteforce(y_slice, img_slice, cfg):
    """Literal double loop over ordered pixel pairs, summed over classes.

    ``y_slice`` is (C, H, W), ``img_slice`` (H, W); ``cfg`` supplies
    ``kernels``, ``exclude_self_pairs`` and ``normalize_by_pairs``.
    """
    y = np.asarray(y_slice, dtype=np.float64)
    img = np.asarray(img_slice, dtype=np.float64)
    C, H, W = y.shape
    if H > MAX_CRF_SIDE or W > MAX_CRF_SIDE:
        raise OracleSizeError(f"slice {H}x{W} exceeds {MAX_CRF_SIDE}x{MAX_CRF_SIDE}")
    kernels = [_kernel_params(k) for k in cfg.kernels]
    pix = [(a, b) for a in range(H) for b in range(W)]
    total = 0.0
    pairs = 0
    for i, (ai, bi) in enumerate(pix):
        for j, (aj, bj) in enumerate(pix):
            if i == j and cfg.exclude_self_pairs:
                continue
            pairs += 1
            dist2 = (ai - aj) ** 2 + (bi - bj) ** 2
            kij = 0.0
            for weight, kind, ss, si in kernels:
                expo = -dist2 / (2.0 * ss * ss)
                if kind == "bilateral":
                    expo -= (img[ai, bi] - img[aj, bj]) ** 2 / (2.0 * si * si)
                kij += weight * math.exp(expo)
            for c in range(C):
                total += y[c, ai, bi] * (1.0 - y[c, aj, bj]) * kij
    if cfg.normalize_by_pairs and pairs:
        total /= pairs
    return total


def mcrf_bruteforce(y, img, cfg):
    """Three-view mean of per-slice brute-force CRF energies; ``y`` is (C, X, Y, Z)."""
    y = np.asarray(y, dtype=np.float64)
    img = np.asarray(img, dtype=np.float64)
    _, X, Y, Z = y.shape
    axial = np.mean([crf_bruteforce(y[:, :, :, z], img[:, :, z], cfg) for z in range(Z)])
    sagittal = np.mean([crf_bruteforce(y[:, :, j, :], img[:, j, :], cfg) for j in range(Y)])
    coronal = np.mean([crf_bruteforce(y[:, i, :, :], img[i, :, :], cfg) for i in range(X)])
    return (axial + sagittal + coronal) / 3.0


def pce_bruteforce(y, s, ignore=255):
    y = np.asarray(y, dtype=np.float64)
    s = np.asarray(s)
    total, n = 0.0, 0
    for idx in np.ndindex(s.shape):
        if s[idx] == ignore:
            continue
        total += -math.log(max(y[(int(s[idx]),) + idx], 1e-12))
        n += 1
    return total / n if n else 0.0


def mse_bruteforce(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return sum((x - z) ** 2 for x, z in zip(a, b)) / len(a)


def _surface_voxels(mask):
    """Voxels of ``mask`` with at least one 6-neighbour outside it (or outside the grid)."""
    pts = []
    X, Y, Z = mask.shape
    for x in range(X):
        for y in range(Y):
            for z in range(Z):
                if not mask[x, y, z]:
                    continue
                for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    u, v, w = x + dx, y + dy, z + dz
                    if not (0 <= u < X and 0 <= v < Y and 0 <= w < Z) or not mask[u, v, w]:
                        pts.append((x, y, z))
                        break
    return pts


def asd_bruteforce(pred, gt, class_id, spacing):
    """Symmetric average surface distance by explicit all-pairs minima.

    Returns 0.0 when both structures are empty and ``None`` when exactly one is.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if max(pred.shape) > MAX_ASD_SIDE:
        raise OracleSizeError(f"mask {pred.shape} exceeds {MAX_ASD_SIDE}^3")
    a = _surface_voxels(pred == class_id)
    b = _surface_voxels(gt == class_id)
    if not a and not b:
        return 0.0
    if not a or not b:
        return None
    sp = [float(s) for s in spacing]

    def directed(src, dst):
        acc = 0.0
        for p in src:
            best = math.inf
            for q in dst:
                d = math.sqrt(sum(((p[k] - q[k]) * sp[k]) ** 2 for k in range(3)))
                if d < best:
                    best = d
            acc += best
        return acc / len(src)

    return 0.5 * (directed(a, b) + directed(b, a))


def dsc_bruteforce(pred, gt, class_id):
    inter = p = g = 0
    for a, b in zip(np.asarray(pred).ravel(), np.asarray(gt).ravel()):
        p += a == class_id
        g += b == class_id
        inter += (a == class_id) and (b == class_id)
    return 1.0 if p + g == 0 else 2.0 * inter / (p + g)


@dataclass
class GradCheckReport:
    step: float
    threshold: float
    max_rel_error: list = field(default_factory=list)
    nonfinite: list = field(default_factory=list)

    @property
    def passed(self):
        return not any(self.nonfinite) and all(e < self.threshold for e in self.max_rel_error)

    @property
    def worst(self):
        return max(self.max_rel_error) if self.max_rel_error else 0.0


def finite_diff_grad(loss_fn, inputs, analytic, step=1e-4, threshold=1e-4, abs_floor=1e-6):
    """Central-difference check of ``analytic`` gradients of ``loss_fn(*inputs)``.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, abs_floor)``;
    the floor keeps coordinates whose true gradient is ~0 from dominating.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    report = GradCheckReport(step=step, threshold=threshold)
    for k, (x, g) in enumerate(zip(arrays, analytic)):
        g = np.asarray(g, dtype=np.float64)
        num = np.zeros_like(x)
        bad = []
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(loss_fn(*arrays))
            flat[i] = orig - step
            fm = float(loss_fn(*arrays))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                bad.append(i)
                continue
            num.reshape(-1)[i] = (fp - fm) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(g), np.abs(num)), abs_floor)
        rel = np.abs(g - num) / denom
        report.max_rel_error.append(float(rel.max()) if rel.size else 0.0)
        report.nonfinite.append(bad)
    return report
