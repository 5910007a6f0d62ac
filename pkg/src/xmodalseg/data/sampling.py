from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import LabelMask, ModalityPair, ScribbleMask, Volume

# probability that a training crop is forced to contain a scribbled voxel;
# the rest are uniform, which alone rarely hits an isolated voxel near a border
SCRIBBLE_BIAS = 0.98


def _crop_array(a, offset, size):
    sl = tuple(slice(o, o + s) for o, s in zip(offset, size))
    return a[sl]


def crop_pair(pair: ModalityPair, offset, size) -> ModalityPair:
    """Crop every member of ``pair`` at ``offset``; origins shift accordingly."""
    def shifted(origin, spacing):
        return tuple(o + i * s for o, i, s in zip(origin, offset, spacing))

    ct, mr = pair.ct, pair.mr
    out = ModalityPair(
        ct=Volume(_crop_array(ct.values, offset, size), ct.spacing, shifted(ct.origin, ct.spacing)),
        mr=Volume(_crop_array(mr.values, offset, size), mr.spacing, shifted(mr.origin, mr.spacing)),
        case_id=pair.case_id,
    )
    if pair.gt is not None:
        g = pair.gt
        out.gt = LabelMask(_crop_array(g.values, offset, size), g.num_classes, g.spacing,
                           shifted(g.origin, g.spacing))
    if pair.scribble is not None:
        s = pair.scribble
        out.scribble = ScribbleMask(_crop_array(s.values, offset, size), s.num_classes, s.spacing,
                                    shifted(s.origin, s.spacing))
    return out


def crop_offset(dims, size, rng, bias=SCRIBBLE_BIAS, labeled=None):
    """Draw a crop offset; with probability ``bias`` the crop covers a labeled voxel.

    ``labeled`` is an (n, 3) array of candidate voxel coordinates.
    """
    dims = np.asarray(dims)
    size = np.asarray(size)
    if np.any(size > dims) or np.any(size < 1):
        raise ValueError(f"crop size {tuple(size)} does not fit dims {tuple(dims)}")
    hi = dims - size  # inclusive upper bound of valid offsets
    if labeled is not None and len(labeled) and rng.random() < bias:
        v = labeled[int(rng.integers(len(labeled)))]
        lo_ok = np.maximum(0, v - size + 1)
        hi_ok = np.minimum(hi, v)
        return tuple(int(rng.integers(a, b + 1)) for a, b in zip(lo_ok, hi_ok))
    return tuple(int(rng.integers(0, h + 1)) for h in hi)


def random_crop(pair: ModalityPair, size, seed=0, bias=SCRIBBLE_BIAS) -> ModalityPair:
    """Seeded aligned crop of all members; biased toward scribbled voxels when any exist."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    size = tuple(int(s) for s in size)
    labeled = None
    if pair.scribble is not None:
        labeled = np.argwhere(pair.scribble.labeled)
    off = crop_offset(pair.shape, size, rng, bias, labeled)
    return crop_pair(pair, off, size)


@dataclass(frozen=True)
class CropRecord:
    """Original dims of a padded volume; padding is appended at the high end of each axis."""
    original: tuple
    padded: tuple

    def uncrop(self, a):
        """Undo the padding on an array whose trailing three axes are spatial."""
        sl = (Ellipsis,) + tuple(slice(0, n) for n in self.original)
        return a[sl]


def padded_dims(dims, m):
    return tuple(int(-(-n // m) * m) for n in dims)


def pad_array(a, m):
    """Edge-replicate pad of the trailing three axes up to multiples of ``m``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    dims = a.shape[-3:]
    target = padded_dims(dims, m)
    widths = [(0, 0)] * (a.ndim - 3) + [(0, t - n) for n, t in zip(dims, target)]
    if target == tuple(dims):
        return a.copy(), CropRecord(tuple(dims), target)
    return np.pad(a, widths, mode="edge"), CropRecord(tuple(dims), target)


def pad_to_multiple(v: Volume, m: int):
    values, rec = pad_array(v.values, m)
    return Volume(values, v.spacing, v.origin), rec
