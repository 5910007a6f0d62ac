"""Volume containers and the RVOL on-disk format.

An RVOL volume is a pair of files sharing a stem: ``<stem>.json`` holds the
header and ``<stem>.raw`` holds the voxels in C order (last axis fastest),
little-endian.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IGNORE_VALUE = 255

_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}


class RVolFormatError(ValueError):
    pass


class RVolCorruptionError(ValueError):
    pass


def _triple(x, name):
    t = tuple(float(v) for v in x)
    if len(t) != 3:
        raise ValueError(f"{name} must have 3 components, got {x!r}")
    return t


@dataclass
class Volume:
    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.spacing = _triple(self.spacing, "spacing")
        self.origin = _triple(self.origin, "origin")
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError(f"volume must be 3D with non-empty axes, got {self.values.shape}")
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if not np.isfinite(self.values).all():
            raise ValueError("volume contains non-finite intensities")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class LabelMask:
    values: np.ndarray
    num_classes: int = 2
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint8)
        self.spacing = _triple(self.spacing, "spacing")
        self.origin = _triple(self.origin, "origin")
        if self.values.ndim != 3:
            raise ValueError(f"mask must be 3D, got {self.values.shape}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.values.size and self.values.max() >= self.num_classes:
            raise ValueError(f"label {self.values.max()} out of range for {self.num_classes} classes")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class ScribbleMask:
    values: np.ndarray
    num_classes: int = 2
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    # classes whose regions were too thin to carry a scribble
    skipped: tuple = ()

    ignore_value = IGNORE_VALUE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint8)
        self.spacing = _triple(self.spacing, "spacing")
        self.origin = _triple(self.origin, "origin")
        if self.values.ndim != 3:
            raise ValueError(f"scribble must be 3D, got {self.values.shape}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        bad = (self.values >= self.num_classes) & (self.values != IGNORE_VALUE)
        if bad.any():
            raise ValueError(f"scribble holds labels outside [0, {self.num_classes}) and != 255")

    @property
    def shape(self):
        return self.values.shape

    @property
    def labeled(self):
        return self.values != IGNORE_VALUE

    def labeled_fraction(self):
        return float(self.labeled.mean())


@dataclass
class ModalityPair:
    ct: Volume
    mr: Volume
    gt: LabelMask | None = None
    scribble: ScribbleMask | None = None
    case_id: str = "case"

    def __post_init__(self):
        ref = self.ct
        for name in ("mr", "gt", "scribble"):
            other = getattr(self, name)
            if other is None:
                continue
            if other.shape != ref.shape:
                raise ValueError(f"{name} dims {other.shape} differ from ct dims {ref.shape}")
            if not np.allclose(other.spacing, ref.spacing):
                raise ValueError(f"{name} spacing {other.spacing} differs from ct spacing {ref.spacing}")

    @property
    def shape(self):
        return self.ct.shape

    @property
    def spacing(self):
        return self.ct.spacing


def _stem(path):
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p


def _atomic_write_bytes(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def write_rvol(values, path, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), dtype="float32"):
    if dtype not in _DTYPES:
        raise RVolFormatError(f"unsupported dtype {dtype!r}")
    arr = np.ascontiguousarray(values, dtype=_DTYPES[dtype])
    if arr.ndim != 3:
        raise ValueError("RVOL payload must be 3D")
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "dims": [int(n) for n in arr.shape],
        "spacing_mm": [float(s) for s in spacing],
        "origin_mm": [float(o) for o in origin],
        "dtype": dtype,
        "byte_order": "little",
    }
    _atomic_write_bytes(stem.with_suffix(".raw"), arr.tobytes(order="C"))
    _atomic_write_bytes(stem.with_suffix(".json"), (json.dumps(header, indent=2) + "\n").encode())


def read_rvol(path):
    """Return ``(values, header)`` for an RVOL stem."""
    stem = _stem(path)
    try:
        header = json.loads(stem.with_suffix(".json").read_text())
    except json.JSONDecodeError as e:
        raise RVolFormatError(f"{stem}.json: malformed header: {e}") from e
    try:
        dims = [int(n) for n in header["dims"]]
        _triple(header["spacing_mm"], "spacing_mm")
        _triple(header.get("origin_mm", (0, 0, 0)), "origin_mm")
        dtype = _DTYPES[header["dtype"]]
    except (KeyError, TypeError, ValueError) as e:
        raise RVolFormatError(f"{stem}.json: malformed header: {e!r}") from e
    if len(dims) != 3 or min(dims) < 1:
        raise RVolFormatError(f"{stem}.json: dims must be 3 positive integers, got {dims}")
    if header.get("byte_order", "little") != "little":
        raise RVolFormatError(f"{stem}.json: only little-endian payloads are supported")
    raw = stem.with_suffix(".raw").read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise RVolCorruptionError(
            f"{stem}.raw holds {len(raw)} bytes, header implies {expected} ({dims} x {dtype})")
    values = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    return values, header


def write_volume(v: Volume, path):
    write_rvol(v.values, path, v.spacing, v.origin, "float32")


def read_volume(path) -> Volume:
    values, h = read_rvol(path)
    if values.dtype != np.float32:
        raise RVolFormatError(f"{path}: expected float32 volume, found {h['dtype']}")
    return Volume(values, tuple(h["spacing_mm"]), tuple(h.get("origin_mm", (0, 0, 0))))


def write_mask(m, path):
    """Write a LabelMask or ScribbleMask as a uint8 RVOL."""
    write_rvol(m.values, path, m.spacing, m.origin, "uint8")


def read_label_mask(path, num_classes) -> LabelMask:
    values, h = read_rvol(path)
    return LabelMask(values.astype(np.uint8), num_classes, tuple(h["spacing_mm"]),
                     tuple(h.get("origin_mm", (0, 0, 0))))


def read_scribble(path, num_classes) -> ScribbleMask:
    values, h = read_rvol(path)
    return ScribbleMask(values.astype(np.uint8), num_classes, tuple(h["spacing_mm"]),
                        tuple(h.get("origin_mm", (0, 0, 0))))


@dataclass
class CaseRecord:
    case_id: str
    ct: str
    mr: str
    gt: str | None = None
    scribble: str | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self):
        d = {"case_id": self.case_id, "ct": self.ct, "mr": self.mr}
        if self.gt is not None:
            d["gt"] = self.gt
        if self.scribble is not None:
            d["scribble"] = self.scribble
        d.update(self.extra)
        return d


def read_index(path):
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise RVolFormatError(f"{path}: malformed dataset index: {e}") from e
    if not isinstance(raw, list):
        raise RVolFormatError(f"{path}: dataset index must be a JSON list")
    out = []
    for rec in raw:
        try:
            known = {k: rec[k] for k in ("case_id", "ct", "mr")}
        except (KeyError, TypeError) as e:
            raise RVolFormatError(f"{path}: case record missing {e}") from e
        extra = {k: v for k, v in rec.items() if k not in ("case_id", "ct", "mr", "gt", "scribble")}
        out.append(CaseRecord(gt=rec.get("gt"), scribble=rec.get("scribble"), extra=extra, **known))
    return out


def write_index(records, path):
    path = Path(path)
    payload = json.dumps([r.to_json() for r in records], indent=2) + "\n"
    _atomic_write_bytes(path, payload.encode())


def load_case(rec: CaseRecord, root, num_classes=None) -> ModalityPair:
    """Load a case; ``num_classes`` defaults to the record's ``num_classes`` or 2."""
    root = Path(root)
    k = num_classes or int(rec.extra.get("num_classes", 2))
    ct = read_volume(root / rec.ct)
    mr = read_volume(root / rec.mr)
    gt = read_label_mask(root / rec.gt, k) if rec.gt else None
    scr = read_scribble(root / rec.scribble, k) if rec.scribble else None
    return ModalityPair(ct, mr, gt, scr, rec.case_id)


def load_dataset(index_path, num_classes=None):
    index_path = Path(index_path)
    recs = read_index(index_path)
    return [load_case(r, index_path.parent, num_classes) for r in recs]
