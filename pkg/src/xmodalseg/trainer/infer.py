from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from ..data.sampling import pad_array
from ..data.volume import LabelMask, ModalityPair
from ..network import CrossModalNet, ShapeError
from .checkpoint import load_checkpoint


def _tensor(a):
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))[None, None]


@torch.no_grad()
def predict(model: CrossModalNet, pair: ModalityPair, branches=("mm",)):
    """Voxelwise argmax label arrays for the requested branches, at the pair's original dims."""
    was_training = model.training
    model.eval()
    try:
        ct, rec = pad_array(pair.ct.values, model.cfg.multiple)
        mr, _ = pad_array(pair.mr.values, model.cfg.multiple)
        out = model(_tensor(ct), _tensor(mr))
    finally:
        model.train(was_training)
    return {b: rec.uncrop(out[f"y_{b}"][0].argmax(0).numpy().astype(np.uint8)) for b in branches}


def infer(checkpoint, pair: ModalityPair) -> LabelMask:
    """Segment ``pair`` with the cross-modal branch of a checkpoint (path or loaded model)."""
    model = checkpoint if isinstance(checkpoint, CrossModalNet) else load_checkpoint(Path(checkpoint))
    if pair.ct.shape != pair.mr.shape:
        raise ShapeError(f"ct {pair.ct.shape} and mr {pair.mr.shape} dims differ")
    if pair.gt is not None and pair.gt.num_classes != model.cfg.num_classes:
        raise ShapeError(f"case has {pair.gt.num_classes} classes, model predicts {model.cfg.num_classes}")
    labels = predict(model, pair)["mm"]
    return LabelMask(labels, model.cfg.num_classes, pair.spacing, pair.ct.origin)
