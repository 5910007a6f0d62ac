"""Overlap and surface-distance metrics."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

_SIX = ndimage.generate_binary_structure(3, 1)


def dsc(pred, gt, class_id=1):
    p = np.asarray(pred) == class_id
    g = np.asarray(gt) == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def surface(mask):
    """Boolean map of voxels with a 6-neighbour outside ``mask`` (grid edge counts as outside)."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        return mask
    inner = ndimage.binary_erosion(mask, structure=_SIX, border_value=0)
    return mask & ~inner


def asd(pred, gt, class_id=1, spacing=(1.0, 1.0, 1.0)):
    """Symmetric average surface distance in mm.

    Mean of the two directed averages of distances from one surface's voxels
    to the nearest voxel of the other surface. 0.0 when both structures are
    empty, ``nan`` (undefined) when exactly one is.
    """
    sp = surface(np.asarray(pred) == class_id)
    sg = surface(np.asarray(gt) == class_id)
    has_p, has_g = sp.any(), sg.any()
    if not has_p and not has_g:
        return 0.0
    if has_p != has_g:
        return float("nan")
    dist_to_g = ndimage.distance_transform_edt(~sg, sampling=spacing)
    dist_to_p = ndimage.distance_transform_edt(~sp, sampling=spacing)
    return 0.5 * (float(dist_to_g[sp].mean()) + float(dist_to_p[sg].mean()))


@dataclass
class CaseMetrics:
    case_id: str
    dsc: dict = field(default_factory=dict)
    asd: dict = field(default_factory=dict)

    @property
    def mean_dsc(self):
        return float(np.mean(list(self.dsc.values()))) if self.dsc else float("nan")

    @property
    def mean_asd(self):
        vals = [v for v in self.asd.values() if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")


def to_label(outputs_or_mask):
    """Label array from a LabelMask, an array, or branch outputs (argmax of y_mm)."""
    if isinstance(outputs_or_mask, dict):
        y = outputs_or_mask["y_mm"]
        y = y.detach().cpu().numpy() if hasattr(y, "detach") else np.asarray(y)
        if y.ndim == 5:
            y = y[0]
        return y.argmax(0).astype(np.uint8)
    return np.asarray(getattr(outputs_or_mask, "values", outputs_or_mask))


def evaluate_case(pred, gt, spacing=None, case_id=None, classes=None) -> CaseMetrics:
    """Per-class DSC and ASD over the foreground classes of ``gt``."""
    p = to_label(pred)
    g = to_label(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in dims")
    if spacing is None:
        spacing = getattr(gt, "spacing", (1.0, 1.0, 1.0))
    if classes is None:
        k = getattr(gt, "num_classes", int(max(p.max(), g.max())) + 1)
        classes = range(1, max(k, 2))
    cid = case_id if case_id is not None else getattr(gt, "case_id", "case")
    m = CaseMetrics(cid)
    for c in classes:
        m.dsc[c] = dsc(p, g, c)
        m.asd[c] = asd(p, g, c, spacing)
        if math.isnan(m.asd[c]):
            log.warning("%s class %d: ASD undefined (structure empty in one mask); excluded from means",
                        cid, c)
    return m


def write_metrics_csv(results, path):
    """Rows ``case_id,class,dsc,asd_mm`` then ``mean``/``std`` summary rows over cases."""
    dsc_all = [r.mean_dsc for r in results]
    asd_all = [r.mean_asd for r in results if not math.isnan(r.mean_asd)]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["case_id", "class", "dsc", "asd_mm"])
        for r in results:
            for c in r.dsc:
                a = r.asd[c]
                w.writerow([r.case_id, c, f"{r.dsc[c]:.6f}", "nan" if math.isnan(a) else f"{a:.6f}"])
        w.writerow(["mean", "all", f"{np.mean(dsc_all):.6f}" if dsc_all else "nan",
                    f"{np.mean(asd_all):.6f}" if asd_all else "nan"])
        w.writerow(["std", "all", f"{np.std(dsc_all):.6f}" if dsc_all else "nan",
                    f"{np.std(asd_all):.6f}" if asd_all else "nan"])
    os.replace(tmp, path)
    return summarize(results)


def summarize(results):
    dsc_all = [r.mean_dsc for r in results]
    asd_all = [r.mean_asd for r in results if not math.isnan(r.mean_asd)]
    return {
        "dsc_mean": float(np.mean(dsc_all)) if dsc_all else float("nan"),
        "dsc_std": float(np.std(dsc_all)) if dsc_all else float("nan"),
        "asd_mean": float(np.mean(asd_all)) if asd_all else float("nan"),
        "asd_std": float(np.std(asd_all)) if asd_all else float("nan"),
    }
