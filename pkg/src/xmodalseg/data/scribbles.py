"""Scribble generation from dense ground truth.

Scribbles are drawn per axial slice (fixed index along the last axis) as
connected 8-neighbour curves. Foreground curves follow the morphological
skeleton of the eroded class region; background curves either trace a ring
around the foreground (``manual-sim``) or random-walk through the eroded
far-background (``auto-bg``).
"""
from __future__ import annotations

import logging

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

from .volume import IGNORE_VALUE, LabelMask, ScribbleMask

log = logging.getLogger(__name__)

# fractions of image voxels
DEFAULT_COVERAGE = {"fg": 0.0004, "bg": 0.0008, "auto_bg": 0.0006}
AUTO_BG_RADIUS = 3
MANUAL_BG_OFFSET = 2

_NEIGH8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _ball(r):
    g = np.mgrid[-r:r + 1, -r:r + 1, -r:r + 1]
    return (g ** 2).sum(0) <= r * r


def _disk(r):
    g = np.mgrid[-r:r + 1, -r:r + 1]
    return (g ** 2).sum(0) <= r * r


def _trace(curve_mask, rng):
    """Order the pixels of a thin 2D curve into 8-connected paths."""
    pts = set(zip(*np.nonzero(curve_mask)))
    paths = []
    while pts:
        # prefer an endpoint so a path runs end to end
        def degree(p):
            return sum((p[0] + a, p[1] + b) in pts for a, b in _NEIGH8)
        ordered = sorted(pts)
        ends = [p for p in ordered if degree(p) <= 1]
        start = ends[0] if ends else ordered[int(rng.integers(len(ordered)))]
        path = [start]
        pts.discard(start)
        cur = start
        while True:
            nxt = [(cur[0] + a, cur[1] + b) for a, b in _NEIGH8 if (cur[0] + a, cur[1] + b) in pts]
            if not nxt:
                break
            # 4-neighbours first keeps the path contiguous
            nxt.sort(key=lambda q: abs(q[0] - cur[0]) + abs(q[1] - cur[1]))
            cur = nxt[0]
            pts.discard(cur)
            path.append(cur)
        paths.append(path)
    paths.sort(key=len, reverse=True)
    return paths


def _random_walk(allowed, start, length, rng, visited):
    """Momentum random walk inside ``allowed`` (2D bool), avoiding revisits."""
    path = [start]
    visited.add(start)
    heading = int(rng.integers(8))
    cur = start
    while len(path) < length:
        options = []
        for k in (0, -1, 1, -2, 2):
            d = _NEIGH8_RING[(heading + k) % 8]
            q = (cur[0] + d[0], cur[1] + d[1])
            if (0 <= q[0] < allowed.shape[0] and 0 <= q[1] < allowed.shape[1]
                    and allowed[q] and q not in visited):
                options.append(((heading + k) % 8, q, 1.0 / (1 + abs(k)) ** 2))
        if not options:
            break
        w = np.array([o[2] for o in options])
        heading, cur, _ = options[int(rng.choice(len(options), p=w / w.sum()))]
        visited.add(cur)
        path.append(cur)
    return path


# neighbour offsets in angular order, for headings
_NEIGH8_RING = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)]


def _slice_order(weights, rng):
    """Slices with content, central (heaviest) first with seeded tie-breaks."""
    idx = np.nonzero(weights > 0)[0]
    jitter = rng.uniform(0, 1e-3, size=len(idx))
    return idx[np.argsort(-(weights[idx] + jitter), kind="stable")]


def _place(out, z, path, label, budget):
    n = min(len(path), budget)
    for (a, b) in path[:n]:
        out[a, b, z] = label
    return n


def _fg_scribble(region, out, label, target, rng):
    """Skeleton curves of ``region`` (3D bool), topped up by interior random walks."""
    eroded = np.zeros_like(region)
    for z in range(region.shape[2]):
        eroded[:, :, z] = ndimage.binary_erosion(region[:, :, z], structure=_disk(1))
    order = _slice_order(eroded.sum(axis=(0, 1)).astype(float), rng)
    placed = 0
    for z in order:
        if placed >= target:
            break
        skel = skeletonize(eroded[:, :, z])
        for path in _trace(skel, rng):
            if placed >= target:
                break
            placed += _place(out, z, path, label, target - placed)
    # thin-but-present regions give short skeletons; extend with interior walks
    tries = 0
    while placed < target and tries < 50 and len(order):
        z = order[tries % len(order)]
        allowed = eroded[:, :, z] & (out[:, :, z] == IGNORE_VALUE)
        cand = np.argwhere(allowed)
        tries += 1
        if not len(cand):
            continue
        start = tuple(cand[int(rng.integers(len(cand)))])
        path = _random_walk(allowed, start, target - placed, rng, set())
        placed += _place(out, z, path, label, target - placed)
    return placed


def _bg_walks(allowed3, out, target, rng, prefer=None):
    """Random-walk background curves in ``allowed3`` until ``target`` voxels are set."""
    weights = allowed3.sum(axis=(0, 1)).astype(float) if prefer is None else prefer
    order = _slice_order(weights * (allowed3.sum(axis=(0, 1)) > 0), rng)
    placed, tries = 0, 0
    while placed < target and tries < 200 and len(order):
        z = order[tries % len(order)]
        tries += 1
        allowed = allowed3[:, :, z] & (out[:, :, z] == IGNORE_VALUE)
        cand = np.argwhere(allowed)
        if not len(cand):
            continue
        start = tuple(cand[int(rng.integers(len(cand)))])
        seg = max(4, min(target - placed, max(8, target // 3)))
        path = _random_walk(allowed, start, seg, rng, set())
        placed += _place(out, z, path, 0, target - placed)
    return placed


def gen_scribbles(gt: LabelMask, mode="manual-sim", seed=0, target_coverage=None) -> ScribbleMask:
    """Simulate scribble annotation of ``gt``.

    ``target_coverage`` maps role -> fraction of image voxels; roles are
    ``fg`` (applied to each foreground class separately) and ``bg``. The
    background default depends on ``mode`` (0.08% manual, 0.06% auto-bg).
    """
    if mode not in ("manual-sim", "auto-bg"):
        raise ValueError(f"unknown scribble mode {mode!r}")
    cov = {"fg": DEFAULT_COVERAGE["fg"],
           "bg": DEFAULT_COVERAGE["bg" if mode == "manual-sim" else "auto_bg"]}
    if target_coverage:
        cov.update(target_coverage)
    for role, f in cov.items():
        if not 0 < f <= 0.01:
            raise ValueError(f"target coverage for {role} must be in (0, 0.01], got {f}")

    rng = np.random.default_rng(seed)
    labels = gt.values
    n_vox = labels.size
    out = np.full(labels.shape, IGNORE_VALUE, dtype=np.uint8)
    skipped = []

    fg_target = max(1, int(round(cov["fg"] * n_vox)))
    for c in range(1, gt.num_classes):
        region = labels == c
        if not region.any():
            continue
        if _fg_scribble(region, out, c, fg_target, rng) == 0:
            skipped.append(c)
            log.warning("class %d too thin to scribble; no scribble generated", c)

    fg = labels > 0
    bg_target = max(1, int(round(cov["bg"] * n_vox)))
    if mode == "auto-bg":
        far = ~ndimage.binary_dilation(fg, structure=_ball(AUTO_BG_RADIUS))
        allowed = ndimage.binary_erosion(far, structure=np.ones((3, 3, 1), bool))
        placed = _bg_walks(allowed, out, bg_target, rng)
    else:
        # rings at a fixed offset around the foreground, like a hand-drawn outline
        ring = np.zeros_like(fg)
        for z in range(fg.shape[2]):
            f = fg[:, :, z]
            if f.any():
                inner = ndimage.binary_dilation(f, structure=_disk(MANUAL_BG_OFFSET))
                ring[:, :, z] = ndimage.binary_dilation(inner, structure=np.ones((3, 3), bool)) & ~inner
        placed = 0
        for z in _slice_order(fg.sum(axis=(0, 1)).astype(float), rng):
            if placed >= bg_target:
                break
            paths = _trace(ring[:, :, z], rng)
            if paths:
                placed += _place(out, z, paths[0], 0, min(bg_target - placed, max(8, bg_target // 3)))
        if placed < bg_target:
            placed += _bg_walks(~fg, out, bg_target - placed, rng)
    if placed == 0:
        skipped.append(0)
        log.warning("no room for a background scribble")

    return ScribbleMask(out, gt.num_classes, gt.spacing, gt.origin, skipped=tuple(skipped))


def check_scribbles(scribble: ScribbleMask, gt: LabelMask):
    """Count scribble voxels that contradict ``gt``; 0 means valid."""
    lab = scribble.labeled
    return int((scribble.values[lab] != gt.values[lab]).sum())
