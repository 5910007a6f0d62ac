"""Command-line entry point: ``xmodalseg <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing/corrupt inputs), 3 runtime failure.  Every random choice takes
its seed from a ``--seed`` flag whose default is 0.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dims(text):
    try:
        d = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z integers, got {text!r}")
    if len(d) != 3 or min(d) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive integers, got {text!r}")
    return d


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# ---- commands ----

def cmd_synth(a):
    from .data.dataset import write_synth_dataset

    if a.cases < 1:
        raise UsageError("--cases must be >= 1")
    if not 0 <= a.val < a.cases:
        raise UsageError("--val must be in [0, cases)")
    out = Path(a.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise DataError(f"output directory not writable: {e}") from e
    index = write_synth_dataset(out, a.cases, a.dims, a.objects, a.classes, a.seed, a.val)
    print(f"wrote {a.cases} cases ({'x'.join(map(str, a.dims))}, {a.classes} classes, seed {a.seed}) "
          f"-> {index}")


def cmd_scribble(a):
    from .data.dataset import add_scribbles

    cov = {}
    if a.coverage_fg is not None:
        cov["fg"] = a.coverage_fg / 100.0
    if a.coverage_bg is not None:
        cov["bg"] = a.coverage_bg / 100.0
    index = Path(a.index)
    if not index.is_file():
        raise DataError(f"{index}: no such index")
    try:
        report = add_scribbles(index, a.mode, a.seed, cov or None)
    except (FileNotFoundError, ValueError) as e:
        if "coverage" in str(e):
            raise UsageError(str(e)) from e
        raise DataError(str(e)) from e
    skipped = {k: v for k, v in report.items() if v}
    print(f"scribbled {len(report)} cases (mode {a.mode}, seed {a.seed})")
    for cid, cls in skipped.items():
        print(f"  {cid}: classes {list(cls)} too small to scribble, left unlabeled")


def _config(a):
    from .trainer.config import make_config

    overrides = list(a.set or [])
    if getattr(a, "index", None):
        overrides.append(("data.index", str(a.index)))
    if getattr(a, "seed", None) is not None:
        overrides.append(("run.seed", a.seed))
        overrides.append(("run.data_seed", a.seed if a.data_seed is None else a.data_seed))
    elif getattr(a, "data_seed", None) is not None:
        overrides.append(("run.data_seed", a.data_seed))
    if getattr(a, "out", None) and a.command == "train":
        overrides.append(("run.checkpoint_dir", str(a.out)))
    return make_config(a.preset, a.config, overrides)


def _header(cfg):
    n, w = cfg.network, cfg.weights
    t = cfg.toggles
    terms = "+".join(k.upper() for k in ("ssl", "imr", "imc") if getattr(t, k))
    return "\n".join([
        f"optimizer Adam  lr={cfg.lr:g}  batch={cfg.batch_size}  accumulate={cfg.accumulate}  "
        f"epochs={cfg.epochs}  crop={'x'.join(map(str, cfg.crop))}",
        f"network CT{n.ct_depth}MR{n.mr_depth}  channels={n.base_channels}  dropout={n.dropout_rate:g}  "
        f"cff={n.enable_cff}  cfe={n.enable_cfe}  single_modality={n.single_modality}",
        f"loss {terms}  lambda_ct={w.lambda_ct:g}  lambda_mr={w.lambda_mr:g}  "
        f"alpha1={w.alpha1:g}  alpha2={w.alpha2:g}  supervision={cfg.supervision}",
        f"seed={cfg.seed}  data_seed={cfg.data_seed}  out={cfg.checkpoint_dir}",
    ])


def cmd_train(a):
    from .trainer.train import train

    cfg = _config(a)
    if a.fullsup:
        cfg.supervision = "dense"
    print(_header(cfg), flush=True)
    if a.dry_run:
        return
    if cfg.index is None or not Path(cfg.index).is_file():
        raise DataError(f"dataset index not found: {cfg.index}")
    res = train(cfg, log_fn=lambda s: print(s, flush=True))
    m = res.best_metrics
    print(f"best epoch {res.best_epoch}: dsc_mm {m.get('dsc_mm', float('nan')):.4f}  "
          f"checkpoint {res.best_checkpoint}")


def _cases(a):
    from .data.volume import ModalityPair, read_volume

    if a.index:
        if not Path(a.index).is_file():
            raise DataError(f"{a.index}: no such index")
        return _load(a.index)
    if not (a.ct and a.mr):
        raise UsageError("give --index, or both --ct and --mr")
    try:
        return [ModalityPair(read_volume(a.ct), read_volume(a.mr), case_id=Path(a.ct).parent.name or "case")]
    except ValueError as e:
        raise DataError(str(e)) from e


def _load(index):
    from .data.volume import load_dataset

    try:
        return load_dataset(index)
    except (ValueError, KeyError) as e:
        raise DataError(f"{index}: {e}") from e


def cmd_infer(a):
    from .data.volume import write_mask
    from .trainer.checkpoint import load_checkpoint
    from .trainer.infer import infer

    model = load_checkpoint(a.checkpoint)
    pairs = _cases(a)
    out = Path(a.out)
    for p in pairs:
        pred = infer(model, p)
        write_mask(pred, out / p.case_id / "pred")
    print(f"wrote {len(pairs)} predictions -> {out}")


def cmd_eval(a):
    from .data.volume import read_label_mask
    from .metrics import evaluate_case, write_metrics_csv

    if not Path(a.index).is_file():
        raise DataError(f"{a.index}: no such index")
    results = []
    for p in _load(a.index):
        if p.gt is None:
            raise DataError(f"case {p.case_id} has no gt mask")
        pred = read_label_mask(Path(a.pred) / p.case_id / "pred", p.gt.num_classes)
        if pred.shape != p.gt.shape:
            raise DataError(f"case {p.case_id}: prediction {pred.shape} vs gt {p.gt.shape}")
        results.append(evaluate_case(pred, p.gt, p.spacing, p.case_id))
    s = write_metrics_csv(results, a.out)
    print(f"{len(results)} cases  DSC {s['dsc_mean']:.3f} +- {s['dsc_std']:.3f}  "
          f"ASD {s['asd_mean']:.2f} +- {s['asd_std']:.2f} mm  -> {a.out}")


def cmd_ablate(a):
    from .trainer.ablate import ablate, build_grid

    a.data_seed = None
    seed_flag, a.seed = a.seed, None
    cfg = _config(a)
    values = {}
    if a.lambda_values:
        values["lambda"] = a.lambda_values
    if a.alpha_values:
        values["alpha"] = a.alpha_values
    if a.depths:
        values["depth"] = [tuple(int(c) for c in pair.split(":")) for pair in a.depths.split(",")]
    grid = build_grid(a.axis, values)
    seeds = a.seeds if a.seeds else [seed_flag]
    print(_header(cfg))
    print(f"grid: {len(grid)} entries x {len(seeds)} seeds over {', '.join(a.axis)}", flush=True)
    if a.dry_run:
        for e in grid:
            print(f"  {e.axis:13s} {e.label}")
        return
    if cfg.index is None or not Path(cfg.index).is_file():
        raise DataError(f"dataset index not found: {cfg.index}")
    out = Path(a.out)
    rows = ablate(cfg, grid, seeds, out, a.jobs, out / "ablation.csv")
    for r in rows:
        print(f"  {r['axis']:13s} {r['label']:14s} seed {r['seed']}  dsc_mm {r['dsc_mm']:.4f}  "
              f"dsc_ct {r['dsc_ct']:.4f}  dsc_mr {r['dsc_mr']:.4f}")
    print(f"{len(rows)} rows -> {out / 'ablation.csv'}")


def cmd_plot(a):
    from .plotting import plot_history, plot_sensitivity

    if not (a.ablation or a.history):
        raise UsageError("give --ablation and/or --history")
    written = []
    for p in (a.ablation, a.history):
        if p and not Path(p).is_file():
            raise DataError(f"{p}: no such file")
    if a.ablation:
        written += plot_sensitivity(a.ablation, a.out)
    if a.history:
        written.append(plot_history(a.history, Path(a.out) / "history.png"))
    for w in written:
        print(f"wrote {w}")


# ---- parser ----

def _add_train_flags(p):
    p.add_argument("--preset", default="desk", choices=["desk", "paper", "bench"],
                   help="base hyperparameters (default desk)")
    p.add_argument("--config", help="JSON config layered over the preset (schema: config.schema.json)")
    p.add_argument("--index", help="dataset index.json (overrides data.index)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted override, value parsed as JSON, e.g. loss.lambda_ct=0.3 (repeatable)")
    p.add_argument("--dry-run", action="store_true", help="print the resolved settings and stop")


def build_parser():
    ap = _Parser(prog="xmodalseg", description="Scribble-supervised cross-modal CT/MR segmentation.")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic CT/MR dataset")
    p.add_argument("--cases", type=int, default=8, help="number of cases (>= 1)")
    p.add_argument("--dims", type=_dims, default=(64, 64, 16), help="X,Y,Z (default 64,64,16)")
    p.add_argument("--objects", type=_positive, default=2, help="blobs per case")
    p.add_argument("--classes", type=int, default=2, choices=range(2, 9), metavar="K",
                   help="label classes including background (2-8)")
    p.add_argument("--val", type=int, default=0, help="tag the last N cases as validation")
    p.add_argument("--seed", type=int, default=0, help="dataset seed (default 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("scribble", help="simulate scribbles for every case in an index")
    p.add_argument("--index", required=True)
    p.add_argument("--mode", default="manual-sim", choices=["manual-sim", "auto-bg"])
    p.add_argument("--coverage-fg", type=float, help="percent of voxels per foreground class (default 0.04)")
    p.add_argument("--coverage-bg", type=float,
                   help="percent of voxels for background (default 0.08 manual-sim, 0.06 auto-bg)")
    p.add_argument("--seed", type=int, default=0, help="default 0")
    p.set_defaults(func=cmd_scribble)

    p = sub.add_parser("train", help="train on an index and keep the best checkpoint")
    _add_train_flags(p)
    p.add_argument("--seed", type=int, help="init and data seed (default 0)")
    p.add_argument("--data-seed", type=int, help="separate seed for split, crops and order")
    p.add_argument("--out", help="checkpoint/history directory (overrides run.checkpoint_dir)")
    p.add_argument("--fullsup", action="store_true", help="dense cross-entropy on gt masks instead of pCE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment cases with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", help="dataset index; predicts every case")
    p.add_argument("--ct", help="single-case CT .json sidecar")
    p.add_argument("--mr", help="single-case MR .json sidecar")
    p.add_argument("--out", required=True, help="writes OUT/<case_id>/pred.json")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="DSC/ASD of predictions against gt")
    p.add_argument("--index", required=True)
    p.add_argument("--pred", required=True, help="directory with <case_id>/pred.json")
    p.add_argument("--out", default="metrics.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    _add_train_flags(p)
    p.add_argument("--axis", action="append", required=True,
                   choices=["depth", "modules", "loss-toggles", "lambda", "alpha"], help="repeatable")
    p.add_argument("--seed", type=int, default=0, help="seed when --seeds is not given (default 0)")
    p.add_argument("--seeds", type=_ints, help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--lambda-values", type=_floats, help="lambda grid within [0, 0.5]")
    p.add_argument("--alpha-values", type=_floats, help="alpha grid within (0, 1]")
    p.add_argument("--depths", help="depth pairs CT:MR, e.g. 3:4,6:4")
    p.add_argument("--jobs", type=_positive, default=1, help="parallel worker processes")
    p.add_argument("--out", default="runs/ablate")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render sensitivity / training curves from CSVs")
    p.add_argument("--ablation", help="ablation.csv from the ablate command")
    p.add_argument("--history", help="history.csv from a training run")
    p.add_argument("--out", default="figures")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    from .data.volume import RVolCorruptionError, RVolFormatError
    from .network import ConfigError, ShapeError
    from .trainer.checkpoint import CheckpointError

    try:
        args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, RVolFormatError, RVolCorruptionError, CheckpointError, ShapeError,
            FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
