"""Triple-branch cross-modal segmentation network.

Two modality-specific V-Net style encoder-decoders (CT and MR, with their
own down-sampling depth) feed a cross-modal branch: same-stage features are
fused (concat -> conv -> PReLU) at stages 1-3, the stage-3 fusion is
enhanced by a strided conv plus three conv modules, and a decoder turns the
result into a third prediction. Tensors are laid out (B, C, X, Y, Z).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

# encoder / decoder conv counts per level; levels past the end reuse the last entry
ENC_CONVS = (1, 2, 3, 2)
DEC_CONVS = (1, 2, 2)
EXTRA_STAGE_CONVS = 2
SHARED_STAGES = 3


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass
class NetworkConfig:
    num_classes: int = 2
    ct_depth: int = 3
    mr_depth: int = 4
    base_channels: int = 16
    kernel_size: int = 5
    dropout_rate: float = 0.5
    enable_cff: bool = True
    enable_cfe: bool = True
    single_modality: bool = False

    @property
    def ct_downsamples(self):
        return downsamples_for(self.ct_depth)

    @property
    def mr_downsamples(self):
        return downsamples_for(self.mr_depth)

    @property
    def multiple(self):
        """Spatial dims must be divisible by this."""
        return 2 ** max(self.ct_downsamples, self.mr_downsamples)

    def validate(self):
        for name in ("ct_depth", "mr_depth"):
            d = getattr(self, name)
            if not 3 <= d <= 6:
                raise ConfigError(f"{name} must be in [3, 6], got {d}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel_size must be odd")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must be in [0, 1)")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"ct_downsamples", "mr_downsamples", "in_channels"}
        if unknown:
            raise ConfigError(f"unknown network keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known}).validate()


def downsamples_for(depth):
    return 3 if depth == 3 else 4


def _n_convs(table, level):
    return table[min(level, len(table) - 1)]


def _match(x, ref):
    """Trim trailing spatial overhang left by upsampling an axis of size 1."""
    return x[..., : ref.shape[-3], : ref.shape[-2], : ref.shape[-1]]


class ResBlock(nn.Module):
    """``n`` conv-norm-PReLU layers with a residual connection."""

    def __init__(self, cin, cout, n, k):
        super().__init__()
        layers = []
        for j in range(n):
            layers.append(nn.Conv3d(cin if j == 0 else cout, cout, k, padding=k // 2))
            layers.append(nn.InstanceNorm3d(cout, affine=True))
            if j < n - 1:
                layers.append(nn.PReLU())
        self.body = nn.Sequential(*layers)
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else nn.Identity()
        self.act = nn.PReLU()

    def forward(self, x):
        return self.act(self.body(x) + self.skip(x))


class DownConv(nn.Module):
    # kernel 3 / pad 1 halves even axes and leaves a size-1 axis at 1
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, 3, stride=2, padding=1)
        self.act = nn.PReLU()

    def forward(self, x):
        return self.act(self.conv(x))


class UpConv(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.ConvTranspose3d(cin, cout, 2, stride=2)
        self.norm = nn.InstanceNorm3d(cout, affine=True)
        self.act = nn.PReLU()

    def forward(self, x, ref):
        return self.act(self.norm(_match(self.conv(x), ref)))


class ModalityBranch(nn.Module):
    """Single-modality encoder-decoder; ``depth`` conv stages below the stem."""

    def __init__(self, depth, num_classes, base, k, dropout):
        super().__init__()
        self.n_down = downsamples_for(depth)
        ch = [base * 2 ** i for i in range(self.n_down + 1)]
        self.channels = ch
        self.stem = ResBlock(1, ch[0], _n_convs(ENC_CONVS, 0), k)
        self.down = nn.ModuleList(DownConv(ch[i - 1], ch[i]) for i in range(1, self.n_down + 1))
        self.enc = nn.ModuleList(
            ResBlock(ch[i], ch[i], _n_convs(ENC_CONVS, i), k) for i in range(1, self.n_down + 1))
        # depth beyond the down-sampling count adds stages at the bottom resolution
        self.extra = nn.ModuleList(
            ResBlock(ch[-1], ch[-1], EXTRA_STAGE_CONVS, k) for _ in range(depth - self.n_down))
        self.up = nn.ModuleList(UpConv(ch[i + 1], ch[i]) for i in range(self.n_down))
        self.dec = nn.ModuleList(ResBlock(2 * ch[i], ch[i], _n_convs(DEC_CONVS, i), k)
                                 for i in range(self.n_down))
        self.head = nn.Conv3d(ch[0], num_classes, 1)
        self.drop = nn.Dropout3d(dropout) if dropout > 0 else nn.Identity()

    def encode(self, x):
        """Return ``[f0, f1, ..., f_n]``; f_i is at 1/2**i resolution."""
        feats = [self.stem(x)]
        for i, (down, enc) in enumerate(zip(self.down, self.enc), start=1):
            f = enc(down(feats[-1]))
            if i == self.n_down:
                for blk in self.extra:
                    f = blk(f)
            if i >= self.n_down - 1:
                f = self.drop(f)
            feats.append(f)
        return feats

    def decode(self, feats):
        x = feats[-1]
        for i in range(self.n_down - 1, -1, -1):
            x = self.up[i](x, feats[i])
            x = self.dec[i](torch.cat([x, feats[i]], dim=1))
        return self.head(x)


class CFF(nn.Module):
    """Fuse same-stage features: PReLU(Conv3x3x3(concat(f_ct, f_mr)))."""

    def __init__(self, c_ct, c_mr, cout):
        super().__init__()
        self.conv = nn.Conv3d(c_ct + c_mr, cout, 3, padding=1)
        self.act = nn.PReLU()

    def forward(self, f_ct, f_mr):
        if f_ct.shape[2:] != f_mr.shape[2:]:
            raise ShapeError(f"cannot fuse features of spatial dims {tuple(f_ct.shape[2:])} "
                             f"and {tuple(f_mr.shape[2:])}")
        return self.act(self.conv(torch.cat([f_ct, f_mr], dim=1)))


class CFE(nn.Module):
    """Strided down-conv on the fused stage-3 block followed by three conv modules."""

    def __init__(self, cin, cout, n_modules=3):
        super().__init__()
        self.down = DownConv(cin, cout)
        self.refine = nn.Sequential(*[
            m for _ in range(n_modules) for m in (nn.Conv3d(cout, cout, 3, padding=1), nn.PReLU())])

    def forward(self, x):
        return self.refine(self.down(x))


class CrossModalBranch(nn.Module):
    def __init__(self, cfg: NetworkConfig, ct_channels, mr_channels):
        super().__init__()
        base, k = cfg.base_channels, cfg.kernel_size
        ch = [base * 2 ** i for i in range(SHARED_STAGES + 2)]
        self.enable_cff, self.enable_cfe = cfg.enable_cff, cfg.enable_cfe
        if cfg.enable_cff:
            self.cff = nn.ModuleList(CFF(ct_channels[i], mr_channels[i], ch[i])
                                     for i in range(1, SHARED_STAGES + 1))
            bottleneck = ch[SHARED_STAGES]
        else:
            self.cff = None
            bottleneck = ct_channels[SHARED_STAGES] + mr_channels[SHARED_STAGES]
        # decoder levels run from the bottleneck level down to full resolution
        if cfg.enable_cfe:
            self.cfe = CFE(bottleneck, ch[SHARED_STAGES + 1])
            top, top_ch = SHARED_STAGES + 1, ch[SHARED_STAGES + 1]
        else:
            self.cfe = None
            top, top_ch = SHARED_STAGES, bottleneck
        self.top = top
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        cin = top_ch
        for lvl in range(top - 1, -1, -1):
            self.up.append(UpConv(cin, ch[lvl]))
            has_skip = cfg.enable_cff and 1 <= lvl <= SHARED_STAGES
            self.dec.append(ResBlock(2 * ch[lvl] if has_skip else ch[lvl], ch[lvl],
                                     _n_convs(DEC_CONVS, lvl), k))
            cin = ch[lvl]
        self.head = nn.Conv3d(ch[0], cfg.num_classes, 1)
        self.drop = nn.Dropout3d(cfg.dropout_rate) if cfg.dropout_rate > 0 else nn.Identity()

    def forward(self, ct_feats, mr_feats, full_res):
        """Return ``(logits, fused)``; ``fused[i]`` is f_mm at stage i (index 0 unused)."""
        fused = [None]
        for i in range(1, SHARED_STAGES + 1):
            if self.cff is not None:
                fused.append(self.cff[i - 1](ct_feats[i], mr_feats[i]))
            elif i == SHARED_STAGES:
                if ct_feats[i].shape[2:] != mr_feats[i].shape[2:]:
                    raise ShapeError("stage-3 features differ in spatial dims")
                fused.append(torch.cat([ct_feats[i], mr_feats[i]], dim=1))
            else:
                fused.append(None)
        x = fused[SHARED_STAGES]
        refs = [full_res] + [ct_feats[i] for i in range(1, SHARED_STAGES + 1)]
        if self.cfe is not None:
            x = self.drop(self.cfe(x))
        for j, lvl in enumerate(range(self.top - 1, -1, -1)):
            x = self.up[j](x, refs[lvl])
            if self.cff is not None and 1 <= lvl <= SHARED_STAGES:
                x = torch.cat([x, fused[lvl]], dim=1)
            x = self.dec[j](x)
        return self.head(x), fused


class CrossModalNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        b, k, p = cfg.base_channels, cfg.kernel_size, cfg.dropout_rate
        self.ct_branch = ModalityBranch(cfg.ct_depth, cfg.num_classes, b, k, p)
        self.mr_branch = ModalityBranch(cfg.mr_depth, cfg.num_classes, b, k, p)
        self.mm_branch = CrossModalBranch(cfg, self.ct_branch.channels, self.mr_branch.channels)

    def check_input(self, x):
        m = self.cfg.multiple
        bad = [n for n in x.shape[2:] if n % m]
        if x.ndim != 5 or bad:
            raise ShapeError(f"input spatial dims {tuple(x.shape[2:])} must be divisible by {m}; "
                             f"pad with pad_to_multiple(volume, {m}) first")

    def forward(self, ct, mr=None, return_features=False):
        self.check_input(ct)
        if self.cfg.single_modality or mr is None:
            mr = ct
        elif mr.shape != ct.shape:
            raise ShapeError(f"ct {tuple(ct.shape)} and mr {tuple(mr.shape)} batches differ")
        f_ct = self.ct_branch.encode(ct)
        f_mr = self.mr_branch.encode(mr)
        z_ct = self.ct_branch.decode(f_ct)
        z_mr = self.mr_branch.decode(f_mr)
        z_mm, fused = self.mm_branch(f_ct, f_mr, ct)
        out = {
            "logits": {"ct": z_ct, "mr": z_mr, "mm": z_mm},
            "y_ct": F.softmax(z_ct, dim=1),
            "y_mr": F.softmax(z_mr, dim=1),
            "y_mm": F.softmax(z_mm, dim=1),
        }
        if return_features:
            out["features"] = {"ct": f_ct[1:], "mr": f_mr[1:], "mm": fused[1:]}
        return out


def build_model(cfg: NetworkConfig) -> CrossModalNet:
    return CrossModalNet(cfg)


def count_params(model) -> int:
    if model is None:
        return 0
    return sum(p.numel() for p in model.parameters())


def branch_param_counts(model: CrossModalNet):
    return {name: count_params(getattr(model, f"{name}_branch")) for name in ("ct", "mr", "mm")}
