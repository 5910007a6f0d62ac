"""Training configuration, presets and JSON (de)serialization."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from ..losses import CRFKernelConfig, Kernel, LossWeights, Toggles
from ..network import ConfigError, NetworkConfig


@dataclass
class TrainConfig:
    index: str | None = None
    network: NetworkConfig = field(default_factory=NetworkConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    crf: CRFKernelConfig = field(default_factory=CRFKernelConfig)
    toggles: Toggles = field(default_factory=Toggles)
    imc_detach: bool = False
    pce_sum: bool = False
    # "scribble" trains on pCE; "dense" replaces it with full-mask cross-entropy
    supervision: str = "scribble"
    lr: float = 1e-3
    batch_size: int = 2
    accumulate: int = 1
    epochs: int = 20
    crop: tuple = (64, 64, 16)
    seed: int = 0
    data_seed: int = 0
    deterministic: bool = True
    val_fraction: float = 0.2
    val_every: int = 1
    selection: str = "best"
    checkpoint_dir: str = "runs/default"

    def validate(self):
        self.network.validate()
        if self.supervision not in ("scribble", "dense"):
            raise ConfigError(f"supervision must be 'scribble' or 'dense', got {self.supervision!r}")
        if self.selection not in ("best", "last"):
            raise ConfigError("selection must be 'best' or 'last'")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.accumulate < 1:
            raise ConfigError("lr, batch_size, epochs and accumulate must be positive")
        if len(self.crop) != 3 or min(self.crop) < 1:
            raise ConfigError(f"crop must be 3 positive ints, got {self.crop}")
        m = self.network.multiple
        if any(c % m for c in self.crop):
            raise ConfigError(f"crop {tuple(self.crop)} must be divisible by {m} for this network depth")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")
        if not (self.toggles.ssl or self.toggles.imr or self.toggles.imc):
            raise ConfigError("all loss terms disabled; nothing to optimize")
        return self

    def to_dict(self):
        return {
            "data": {"index": self.index, "val_fraction": self.val_fraction,
                     "supervision": self.supervision},
            "network": self.network.to_dict(),
            "loss": {
                "lambda_ct": self.weights.lambda_ct,
                "lambda_mr": self.weights.lambda_mr,
                "alpha1": self.weights.alpha1,
                "alpha2": self.weights.alpha2,
                "crf": {
                    "kernels": [asdict(k) for k in self.crf.kernels],
                    "exclude_self_pairs": self.crf.exclude_self_pairs,
                    "normalize_by_pairs": self.crf.normalize_by_pairs,
                    "max_pixels": self.crf.max_pixels,
                },
                "toggles": asdict(self.toggles),
                "imc_detach": self.imc_detach,
                "pce_sum": self.pce_sum,
            },
            "optim": {"lr": self.lr, "batch_size": self.batch_size, "accumulate": self.accumulate,
                      "epochs": self.epochs, "crop": list(self.crop)},
            "run": {"seed": self.seed, "data_seed": self.data_seed,
                    "deterministic": self.deterministic, "val_every": self.val_every,
                    "selection": self.selection, "checkpoint_dir": self.checkpoint_dir},
        }

    @classmethod
    def from_dict(cls, d):
        validate_config_dict(d)
        data, loss, optim, run = (d.get(k, {}) for k in ("data", "loss", "optim", "run"))
        crf = loss.get("crf", {})
        cfg = cls(
            index=data.get("index"),
            val_fraction=data.get("val_fraction", 0.2),
            supervision=data.get("supervision", "scribble"),
            network=NetworkConfig.from_dict(d.get("network", {})),
            weights=LossWeights(**{k: loss[k] for k in ("lambda_ct", "lambda_mr", "alpha1", "alpha2")
                                   if k in loss}),
            crf=CRFKernelConfig(
                kernels=[Kernel(**k) for k in crf["kernels"]] if "kernels" in crf else
                CRFKernelConfig().kernels,
                exclude_self_pairs=crf.get("exclude_self_pairs", True),
                normalize_by_pairs=crf.get("normalize_by_pairs", True),
                max_pixels=crf.get("max_pixels"),
            ),
            toggles=Toggles(**loss.get("toggles", {})),
            imc_detach=loss.get("imc_detach", False),
            pce_sum=loss.get("pce_sum", False),
            lr=optim.get("lr", 1e-3),
            batch_size=optim.get("batch_size", 2),
            accumulate=optim.get("accumulate", 1),
            epochs=optim.get("epochs", 20),
            crop=tuple(optim.get("crop", (64, 64, 16))),
            seed=run.get("seed", 0),
            data_seed=run.get("data_seed", 0),
            deterministic=run.get("deterministic", True),
            val_every=run.get("val_every", 1),
            selection=run.get("selection", "best"),
            checkpoint_dir=run.get("checkpoint_dir", "runs/default"),
        )
        return cfg.validate()


def config_schema():
    return json.loads(resources.files("xmodalseg").joinpath("config.schema.json").read_text())


def validate_config_dict(d):
    try:
        jsonschema.validate(d, config_schema())
    except jsonschema.ValidationError as e:
        path = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {path}: {e.message}") from e


# Desk-scale defaults are the dataclass defaults; the named presets are partial dicts.
PRESETS = {
    "desk": {},
    "paper": {
        "network": {"dropout_rate": 0.5},
        "loss": {"lambda_ct": 0.2, "lambda_mr": 0.2, "alpha1": 0.8, "alpha2": 0.8},
        "optim": {"lr": 1e-5, "batch_size": 16, "epochs": 200, "crop": [96, 96, 16]},
    },
    # small network and crops used by the acceptance trend runs on one CPU
    "bench": {
        "network": {"base_channels": 4, "kernel_size": 3, "dropout_rate": 0.1},
        "loss": {"crf": {"max_pixels": 256}},
        "optim": {"lr": 3e-3, "batch_size": 2, "epochs": 12, "crop": [32, 32, 16]},
        "run": {"val_every": 2},
    },
}


def deep_merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_dotted(d, key, value):
    """Set ``d["a"]["b"] = value`` for ``key="a.b"``, creating levels as needed."""
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value


def parse_override(text):
    """``"loss.lambda_ct=0.3"`` -> ``("loss.lambda_ct", 0.3)``; values parse as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def make_config(preset="desk", path=None, overrides=()) -> TrainConfig:
    """Preset, then config file, then dotted overrides, each layered on the previous."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    d = deep_merge(TrainConfig().to_dict(), PRESETS[preset])
    if path is not None:
        try:
            d = deep_merge(d, json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: malformed JSON: {e}") from e
    for item in overrides:
        key, value = item if isinstance(item, tuple) else parse_override(item)
        set_dotted(d, key, value)
    return TrainConfig.from_dict(d)
