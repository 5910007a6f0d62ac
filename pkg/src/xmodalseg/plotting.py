"""Static figures from the CSVs written by training and ablation runs."""
from __future__ import annotations

import csv
import math
import os
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _num(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return float("nan")


def _save(fig, out):
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.stem + ".tmp" + out.suffix)
    fig.savefig(tmp, dpi=120, bbox_inches="tight")
    plt.close(fig)
    os.replace(tmp, out)
    return out


def _seed_means(rows, x_key, y_key):
    acc = defaultdict(list)
    for r in rows:
        y = _num(r.get(y_key))
        if not math.isnan(y):
            acc[_num(r[x_key])].append(y)
    xs = sorted(acc)
    return xs, [sum(acc[x]) / len(acc[x]) for x in xs]


def plot_sensitivity(ablation_csv, out_dir):
    """DSC / ASD against λ and α (seed-averaged), one figure per swept axis present in the CSV."""
    rows = read_csv(ablation_csv)
    written = []
    for axis, x_key, xlabel in (("lambda", "lambda_ct", r"$\lambda_{ct} = \lambda_{mr}$"),
                                ("alpha", "alpha1", r"$\alpha_1 = \alpha_2$")):
        sub = [r for r in rows if r["axis"] == axis]
        if not sub:
            continue
        fig, (ax_d, ax_a) = plt.subplots(1, 2, figsize=(9, 3.5))
        for branch in ("mm", "ct", "mr"):
            ax_d.plot(*_seed_means(sub, x_key, f"dsc_{branch}"), marker="o", label=f"y_{branch}")
            ax_a.plot(*_seed_means(sub, x_key, f"asd_{branch}"), marker="o", label=f"y_{branch}")
        ax_d.set_ylabel("DSC")
        ax_a.set_ylabel("ASD (mm)")
        for ax in (ax_d, ax_a):
            ax.set_xlabel(xlabel)
            ax.grid(alpha=0.3)
        ax_d.legend()
        written.append(_save(fig, Path(out_dir) / f"sensitivity_{axis}.png"))
    return written


def plot_history(history_csv, out):
    """Total/per-term loss and validation DSC per epoch."""
    rows = read_csv(history_csv)
    if not rows:
        raise ValueError(f"{history_csv}: no rows")
    ep = [int(r["epoch"]) for r in rows]
    fig, (ax_l, ax_d) = plt.subplots(1, 2, figsize=(9, 3.5))
    for k in rows[0]:
        if k.startswith("loss_"):
            ax_l.plot(ep, [_num(r[k]) for r in rows], label=k[5:])
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("loss")
    ax_l.legend()
    for b in ("mm", "ct", "mr"):
        pts = [(e, _num(r.get(f"dsc_{b}"))) for e, r in zip(ep, rows)]
        pts = [(e, v) for e, v in pts if not math.isnan(v)]
        if pts:
            ax_d.plot(*zip(*pts), marker=".", label=f"y_{b}")
    ax_d.set_xlabel("epoch")
    ax_d.set_ylabel("val DSC")
    if ax_d.lines:
        ax_d.legend()
    return _save(fig, out)
