"""Ablation grid runner: one training per (grid entry, seed), results collected into a CSV."""
from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from ..network import ConfigError
from .config import TrainConfig, deep_merge

LAMBDA_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
ALPHA_GRID = (0.2, 0.4, 0.6, 0.8, 1.0)
DEPTHS = (3, 4, 5, 6)


@dataclass
class GridEntry:
    axis: str
    label: str
    overrides: dict = field(default_factory=dict)


def _toggles(ssl, imr, imc):
    return {"loss": {"toggles": {"ssl": ssl, "imr": imr, "imc": imc}}}


def axis_entries(axis, values=None):
    """Entries for one named axis. ``values`` narrows the depth pairs or the λ / α grid."""
    if axis == "depth":
        pairs = values if values is not None else [(c, m) for c in DEPTHS for m in DEPTHS]
        return [GridEntry(axis, f"CT{c}MR{m}", {"network": {"ct_depth": int(c), "mr_depth": int(m)}})
                for c, m in pairs]
    if axis == "modules":
        rows = [("MFL", False, False), ("MFL+CFE", False, True), ("MFL+CFE+CFF", True, True)]
        return [GridEntry(axis, name, {"network": {"enable_cff": cff, "enable_cfe": cfe}})
                for name, cff, cfe in rows]
    if axis == "loss-toggles":
        rows = [("SSL", False, False), ("SSL+IMR", True, False), ("SSL+IMC", False, True),
                ("SSL+IMR+IMC", True, True)]
        return [GridEntry(axis, name, _toggles(True, imr, imc)) for name, imr, imc in rows]
    if axis == "lambda":
        grid = values if values is not None else LAMBDA_GRID
        bad = [v for v in grid if not 0.0 <= v <= 0.5]
        if bad:
            raise ConfigError(f"lambda values must lie in [0, 0.5], got {bad}")
        return [GridEntry(axis, f"lambda={v:g}", {"loss": {"lambda_ct": float(v), "lambda_mr": float(v)}})
                for v in grid]
    if axis == "alpha":
        grid = values if values is not None else ALPHA_GRID
        bad = [v for v in grid if not 0.0 < v <= 1.0]
        if bad:
            raise ConfigError(f"alpha values must lie in (0, 1], got {bad}")
        return [GridEntry(axis, f"alpha={v:g}", {"loss": {"alpha1": float(v), "alpha2": float(v)}})
                for v in grid]
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}")


AXES = ("depth", "modules", "loss-toggles", "lambda", "alpha")


def build_grid(axes, values=None):
    """Concatenate the entries of each axis; ``values`` maps axis name -> explicit values."""
    values = values or {}
    grid = []
    for a in axes:
        grid += axis_entries(a, values.get(a))
    if not grid:
        raise ConfigError("ablation grid is empty")
    return grid


CSV_FIELDS = ["axis", "label", "seed", "ct_depth", "mr_depth", "enable_cfe", "enable_cff",
              "ssl", "imr", "imc", "lambda_ct", "lambda_mr", "alpha1", "alpha2", "best_epoch",
              "dsc_mm", "dsc_ct", "dsc_mr", "asd_mm", "asd_ct", "asd_mr", "checkpoint_dir"]


def _run_one(job):
    base, entry, seed, out_dir = job
    from .train import train  # imported here so worker processes stay light until needed

    d = deep_merge(base, entry.overrides)
    run_dir = Path(out_dir) / f"{entry.axis}_{entry.label}_s{seed}".replace("=", "")
    d = deep_merge(d, {"run": {"seed": seed, "data_seed": seed, "checkpoint_dir": str(run_dir)}})
    cfg = TrainConfig.from_dict(d)
    res = train(cfg)
    n, w, t = cfg.network, cfg.weights, cfg.toggles
    row = dict(axis=entry.axis, label=entry.label, seed=seed, ct_depth=n.ct_depth, mr_depth=n.mr_depth,
               enable_cfe=n.enable_cfe, enable_cff=n.enable_cff, ssl=t.ssl, imr=t.imr, imc=t.imc,
               lambda_ct=w.lambda_ct, lambda_mr=w.lambda_mr, alpha1=w.alpha1, alpha2=w.alpha2,
               best_epoch=res.best_epoch, checkpoint_dir=str(run_dir))
    for k in CSV_FIELDS:
        if k.startswith(("dsc_", "asd_")):
            row[k] = res.best_metrics.get(k, float("nan"))
    return row


def ablate(base: TrainConfig, grid, seeds=(0,), out_dir="runs/ablate", jobs=1, csv_path=None):
    """Train every grid entry for every seed and return the rows (also written to ``csv_path``).

    Entries are independent, so ``jobs > 1`` fans them out over worker processes,
    each writing into its own checkpoint directory.
    """
    grid = list(grid)
    if not grid or not list(seeds):
        raise ConfigError("ablation grid is empty")
    base_d = base.to_dict()
    jobs_list = [(base_d, e, int(s), str(out_dir)) for e in grid for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(jobs_list))) as ex:
            rows = list(ex.map(_run_one, jobs_list))
    else:
        rows = [_run_one(j) for j in jobs_list]
    if csv_path is not None:
        write_rows(rows, csv_path)
    return rows


def write_rows(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        w.writeheader()
        w.writerows(rows)
    os.replace(tmp, path)
