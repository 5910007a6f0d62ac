"""On-disk synthetic datasets: one directory of RVOL files per case plus ``index.json``."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .scribbles import gen_scribbles
from .synth import synth_pair
from .volume import (CaseRecord, read_index, read_label_mask, write_index, write_mask,
                     write_volume)


def case_seed(seed, i):
    return int(np.random.SeedSequence((int(seed), int(i))).generate_state(1)[0])


def write_synth_dataset(out, cases, dims=(64, 64, 16), objects=2, classes=2, seed=0, n_val=0):
    """Write ``cases`` synthetic pairs; the last ``n_val`` are tagged ``"split": "val"``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    recs = []
    for i in range(cases):
        cid = f"case_{i:04d}"
        pair = synth_pair(case_seed(seed, i), dims, objects, classes, case_id=cid)
        write_volume(pair.ct, out / cid / "ct")
        write_volume(pair.mr, out / cid / "mr")
        write_mask(pair.gt, out / cid / "gt")
        extra = {"num_classes": classes}
        if n_val:
            extra["split"] = "val" if i >= cases - n_val else "train"
        recs.append(CaseRecord(cid, f"{cid}/ct.json", f"{cid}/mr.json", f"{cid}/gt.json", extra=extra))
    index = out / "index.json"
    write_index(recs, index)
    return index


def add_scribbles(index, mode="manual-sim", seed=0, coverage=None, num_classes=None):
    """Generate a scribble file per case next to its gt and record it in the index.

    Returns ``{case_id: skipped_classes}``. Raises ``FileNotFoundError`` or
    ``ValueError`` when a case lacks a gt mask.
    """
    index = Path(index)
    recs = read_index(index)
    report = {}
    for i, r in enumerate(recs):
        if not r.gt:
            raise ValueError(f"case {r.case_id} has no gt mask to scribble from")
        k = num_classes or int(r.extra.get("num_classes", 2))
        gt = read_label_mask(index.parent / r.gt, k)
        scr = gen_scribbles(gt, mode, case_seed(seed, i), coverage)
        rel = str(Path(r.gt).parent / "scribble.json")
        write_mask(scr, index.parent / rel)
        r.scribble = rel
        report[r.case_id] = scr.skipped
    write_index(recs, index)
    return report
