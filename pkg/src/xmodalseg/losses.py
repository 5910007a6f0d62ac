"""Hybrid-supervised objective for the three branch predictions.

Probability maps are (C, X, Y, Z) or batched (B, C, X, Y, Z) tensors;
scribbles are integer tensors with the matching spatial dims and 255 for
unlabeled voxels. Axial slices are taken along Z, sagittal along Y and
coronal along X.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

IGNORE = 255
LOG_FLOOR = 1e-12


class LossConfigError(ValueError):
    pass


@dataclass
class LossWeights:
    lambda_ct: float = 0.2
    lambda_mr: float = 0.2
    alpha1: float = 0.8
    alpha2: float = 0.8

    def __post_init__(self):
        for k in ("lambda_ct", "lambda_mr", "alpha1", "alpha2"):
            if getattr(self, k) < 0:
                raise LossConfigError(f"{k} must be >= 0")


@dataclass
class Kernel:
    weight: float = 1.0
    kind: str = "bilateral"
    sigma_spatial: float = 5.0
    sigma_intensity: float = 0.1

    def __post_init__(self):
        if self.kind not in ("bilateral", "spatial"):
            raise LossConfigError(f"unknown kernel kind {self.kind!r}")
        if self.weight <= 0 or self.sigma_spatial <= 0 or (
                self.kind == "bilateral" and self.sigma_intensity <= 0):
            raise LossConfigError("kernel weights and sigmas must be > 0")


def default_kernels():
    return [Kernel(1.0, "bilateral", 5.0, 0.1), Kernel(1.0, "spatial", 3.0, 0.0)]


@dataclass
class CRFKernelConfig:
    kernels: list = field(default_factory=default_kernels)
    exclude_self_pairs: bool = True
    normalize_by_pairs: bool = True
    # cap on pixels per slice; larger slices are randomly subsampled
    max_pixels: int | None = None

    def __post_init__(self):
        self.kernels = [k if isinstance(k, Kernel) else Kernel(**k) for k in self.kernels]
        if not self.kernels:
            raise LossConfigError("CRF needs at least one kernel")


@dataclass
class Toggles:
    ssl: bool = True
    imr: bool = True
    imc: bool = True


def _labels_check(s, num_classes):
    lab = s != IGNORE
    if lab.any() and int(s[lab].max()) >= num_classes:
        raise LossConfigError(f"scribble label {int(s[lab].max())} >= num_classes {num_classes}")
    return lab


def _batched(y, s=None):
    if y.ndim == 4:
        y = y.unsqueeze(0)
        if s is not None:
            s = s.unsqueeze(0)
    return y, s


def pce_loss(y, s, reduction="mean"):
    """Partial cross-entropy over scribbled voxels.

    ``reduction="mean"`` averages over labeled voxels, ``"sum"`` gives the
    plain sum. Returns 0 when nothing is labeled.
    """
    y, s = _batched(y, s)
    s = torch.as_tensor(s, device=y.device).long()
    if s.shape != y.shape[:1] + y.shape[2:]:
        raise LossConfigError(f"scribble dims {tuple(s.shape)} do not match prediction {tuple(y.shape)}")
    lab = _labels_check(s, y.shape[1])
    n = int(lab.sum())
    if n == 0:
        return y.sum() * 0.0
    idx = torch.where(lab, s, torch.zeros_like(s)).unsqueeze(1)
    p = torch.gather(y, 1, idx).squeeze(1)[lab]
    nll = -torch.log(p.clamp_min(LOG_FLOOR))
    return nll.sum() if reduction == "sum" else nll.sum() / n


def ssl_loss(outputs, s, reduction="mean"):
    return sum(pce_loss(outputs[k], s, reduction) for k in ("y_ct", "y_mr", "y_mm"))


def dense_ce_loss(y, gt):
    """Cross-entropy with every voxel labeled."""
    return pce_loss(y, gt, "mean")


def _grid_sqdist(h, w, dtype, device):
    a = torch.arange(h, dtype=dtype, device=device)
    b = torch.arange(w, dtype=dtype, device=device)
    pa, pb = torch.meshgrid(a, b, indexing="ij")
    pos = torch.stack([pa.reshape(-1), pb.reshape(-1)], dim=1)
    return torch.cdist(pos, pos).pow(2), pos


def _kernel_matrix(img, d2, cfg):
    """(S, N, N) affinity for S flattened slices ``img`` of N pixels."""
    K = None
    for k in cfg.kernels:
        spatial = -d2 / (2 * k.sigma_spatial ** 2)
        if k.kind == "bilateral":
            di = img.unsqueeze(2) - img.unsqueeze(1)
            term = k.weight * torch.exp(spatial.unsqueeze(0) - di.pow(2) / (2 * k.sigma_intensity ** 2))
        else:
            term = (k.weight * torch.exp(spatial)).unsqueeze(0).expand(img.shape[0], -1, -1)
        K = term if K is None else K + term
    if cfg.exclude_self_pairs:
        eye = torch.eye(K.shape[-1], dtype=torch.bool, device=K.device)
        K = K.masked_fill(eye, 0.0)
    return K


# upper bound on kernel-matrix elements held at once (slices are batched up to this)
KERNEL_BUDGET = 1 << 24


def crf_slices(y, img, cfg: CRFKernelConfig, generator=None, chunk=None):
    """Per-slice pairwise energy for a stack of 2D slices.

    ``y``: (S, C, H, W) probabilities, ``img``: (S, H, W) intensities.
    Returns an (S,) tensor.
    """
    if not torch.isfinite(img).all():
        raise LossConfigError("CRF intensities must be finite")
    S, C, H, W = y.shape
    N = H * W
    # contiguous copies make the result independent of the caller's memory layout
    yf = y.reshape(S, C, N).contiguous()
    If = img.reshape(S, N).to(y.dtype).contiguous()
    d2, _ = _grid_sqdist(H, W, y.dtype, y.device)
    if cfg.max_pixels is not None and N > cfg.max_pixels:
        sel = torch.randperm(N, generator=generator, device="cpu")[: cfg.max_pixels].to(y.device)
        yf, If, d2 = yf[:, :, sel], If[:, sel], d2[sel][:, sel]
        N = cfg.max_pixels
    pairs = N * (N - 1) if cfg.exclude_self_pairs else N * N
    if chunk is None:
        chunk = max(1, KERNEL_BUDGET // (N * N))
    out = []
    for a in range(0, S, chunk):
        K = _kernel_matrix(If[a:a + chunk], d2, cfg)
        ys = yf[a:a + chunk]
        # sum_{i,j} y_i K_ij (1 - y_j) per class; one-hot inputs give an exact zero
        Kq = torch.einsum("sij,scj->sci", K, 1 - ys)
        out.append((ys * Kq).sum((1, 2)))
    e = torch.cat(out)
    if cfg.normalize_by_pairs:
        e = e / max(pairs, 1)
    return e


def crf_loss_2d(y_slice, img_slice, cfg: CRFKernelConfig, generator=None):
    """Pairwise CRF energy of one 2D slice; ``y_slice`` is (C, H, W)."""
    if y_slice.shape[1:] != img_slice.shape:
        raise LossConfigError(f"slice dims {tuple(y_slice.shape[1:])} vs image {tuple(img_slice.shape)}")
    return crf_slices(y_slice.unsqueeze(0), img_slice.unsqueeze(0), cfg, generator)[0]


def view_terms(y, img, cfg: CRFKernelConfig, generator=None):
    """Mean slice energy for the axial (Z), sagittal (Y) and coronal (X) stacks.

    ``y``: (C, X, Y, Z), ``img``: (X, Y, Z).
    """
    axial = crf_slices(y.permute(3, 0, 1, 2), img.permute(2, 0, 1), cfg, generator).mean()
    sagittal = crf_slices(y.permute(2, 0, 1, 3), img.permute(1, 0, 2), cfg, generator).mean()
    coronal = crf_slices(y.permute(1, 0, 2, 3), img, cfg, generator).mean()
    return axial, sagittal, coronal


def mcrf_loss(y, img, cfg: CRFKernelConfig, generator=None):
    """Multi-view CRF loss, averaged over the batch when ``y`` is 5D."""
    img = torch.as_tensor(img, device=y.device)
    y, _ = _batched(y)
    if img.ndim == 3:
        img = img.unsqueeze(0)
    if img.ndim == 5:
        img = img[:, 0]
    if img.shape != y.shape[:1] + y.shape[2:]:
        raise LossConfigError(f"image dims {tuple(img.shape)} do not match prediction {tuple(y.shape)}")
    total = 0.0
    for b in range(y.shape[0]):
        a, s, c = view_terms(y[b], img[b].to(y.dtype), cfg, generator)
        total = total + (a + s + c) / 3
    return total / y.shape[0]


def imr_loss(y_mm, ct, mr, w: LossWeights, cfg: CRFKernelConfig, generator=None):
    total = y_mm.sum() * 0.0
    if w.lambda_ct:
        total = total + w.lambda_ct * mcrf_loss(y_mm, ct, cfg, generator)
    if w.lambda_mr:
        total = total + w.lambda_mr * mcrf_loss(y_mm, mr, cfg, generator)
    return total


def imc_loss(outputs, w: LossWeights, detach_reference=False):
    y_mm, y_ct, y_mr = outputs["y_mm"], outputs["y_ct"], outputs["y_mr"]
    if not (y_mm.shape == y_ct.shape == y_mr.shape):
        raise LossConfigError("branch predictions differ in shape")
    ref = y_mm.detach() if detach_reference else y_mm
    return w.alpha1 * (ref - y_ct).pow(2).mean() + w.alpha2 * (ref - y_mr).pow(2).mean()


def total_loss(outputs, s, ct, mr, w: LossWeights = None, cfg: CRFKernelConfig = None,
               toggles: Toggles = None, imc_detach=False, pce_sum=False, generator=None):
    """Sum of the enabled terms and a float breakdown ``{"ssl", "imr", "imc", "total"}``."""
    w = w or LossWeights()
    cfg = cfg or CRFKernelConfig()
    toggles = toggles or Toggles()
    if not (toggles.ssl or toggles.imr or toggles.imc):
        raise LossConfigError("all loss terms disabled; nothing to optimize")
    terms = {}
    if toggles.ssl:
        terms["ssl"] = ssl_loss(outputs, s, "sum" if pce_sum else "mean")
    if toggles.imr:
        terms["imr"] = imr_loss(outputs["y_mm"], ct, mr, w, cfg, generator)
    if toggles.imc:
        terms["imc"] = imc_loss(outputs, w, imc_detach)
    total = sum(terms.values())
    breakdown = {k: float(v.detach()) for k, v in terms.items()}
    breakdown["total"] = float(total.detach())
    return total, breakdown
