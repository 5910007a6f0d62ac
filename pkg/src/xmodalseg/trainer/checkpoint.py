"""Checkpoint archive: a zip of ``manifest.json`` plus one ``.npy`` per parameter.

Entries carry a fixed timestamp and arrays are stored as little-endian
float32, so identical weights give byte-identical files.
"""
from __future__ import annotations

import io
import json
import os
import zipfile
from pathlib import Path

import numpy as np
import torch

from ..network import CrossModalNet, NetworkConfig

FORMAT = "xmodalseg-checkpoint/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _entry(name):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(model: CrossModalNet, path, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    manifest = {
        "format": FORMAT,
        "network": model.cfg.to_dict(),
        "params": {k: list(v.shape) for k, v in state.items()},
        "meta": meta or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as z:
        z.writestr(_entry("manifest.json"), json.dumps(manifest, indent=2, sort_keys=True))
        for name in sorted(state):
            buf = io.BytesIO()
            np.save(buf, state[name].detach().cpu().numpy().astype("<f4"), allow_pickle=False)
            z.writestr(_entry(f"params/{name}.npy"), buf.getvalue())
    os.replace(tmp, path)
    return path


def read_manifest(path):
    with zipfile.ZipFile(path) as z:
        return json.loads(z.read("manifest.json"))


def load_checkpoint(path, expect: NetworkConfig | None = None) -> CrossModalNet:
    """Rebuild the model stored at ``path``; ``expect`` must match its manifest if given."""
    try:
        z = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, FileNotFoundError) as e:
        raise CheckpointError(f"{path}: not a checkpoint archive: {e}") from e
    with z:
        manifest = json.loads(z.read("manifest.json"))
        if manifest.get("format") != FORMAT:
            raise CheckpointError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
        cfg = NetworkConfig.from_dict(manifest["network"])
        if expect is not None and expect.to_dict() != cfg.to_dict():
            diff = {k: (v, cfg.to_dict()[k]) for k, v in expect.to_dict().items() if cfg.to_dict()[k] != v}
            raise CheckpointError(f"{path}: network config mismatch (expected, stored): {diff}")
        model = CrossModalNet(cfg)
        own = model.state_dict()
        if sorted(own) != sorted(manifest["params"]):
            raise CheckpointError(f"{path}: parameter names do not match the network")
        state = {}
        for name, shape in manifest["params"].items():
            arr = np.load(io.BytesIO(z.read(f"params/{name}.npy")), allow_pickle=False)
            if list(arr.shape) != shape or list(own[name].shape) != shape:
                raise CheckpointError(f"{path}: shape mismatch for {name}")
            state[name] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state)
    model.checkpoint_meta = manifest.get("meta", {})
    return model
