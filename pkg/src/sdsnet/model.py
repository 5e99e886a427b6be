"""Shallow-deep synergistic segmentation network.

Data flow for the default 3 shallow + 1 deep layout, input ``H x W``::

    backbone      X1..X4   at 1, 1/2, 1/4, 1/4 scale, channels 32, 64, 128, 128
    scale align   E1..E4   all at H/16 (strided conv, kernel = stride)
    branches      shallow: cross-attention over E1..E3 -> MDFA
                  deep:    self-attention on E4 -> MDFA
    mapping       D_i = X_i + FM_i(branch_i)          (FM: upsample, conv, BN, ReLU)
    decoder       F3 = DCBL(fuse(D3, up(D4))), F_i = DCBL(fuse(D_i, up(F_i+1)))
    heads         T1..T3 from F1..F3, T4 from D4, T5 = fused full-res map
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .adsf import ADSF, ConcatFusion
from .attention import DeepAttention, ShallowAttention
from .config import ModelConfig
from .errors import NonFiniteError, ShapeError
from .layers import ConvBNReLU, DoubleConv, ResidualBlock
from .mdfa import MDFA
from .supervision import FusionHead, PredictionHead, PredictionSet


class Backbone(nn.Module):
    """One residual (or plain double-conv) stage per scale, strided transitions."""

    def __init__(self, in_channels, channels, scales, residual=True):
        super().__init__()
        block = ResidualBlock if residual else DoubleConv
        self.stem = ConvBNReLU(in_channels, channels[0])
        stages = []
        prev_c, prev_s = channels[0], 1
        for c, s in zip(channels, scales):
            stages.append(block(prev_c, c, stride=s // prev_s))
            prev_c, prev_s = c, s
        self.stages = nn.ModuleList(stages)
        self.scales = tuple(scales)

    def forward(self, x):
        h, w = x.shape[-2:]
        m = max(self.scales)
        if h % m or w % m:
            raise ShapeError(f"input {h}x{w} not divisible by {m}")
        out = []
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out


class ScaleAlign(nn.Module):
    """Strided conv with kernel = stride, bringing a stage to the patch grid."""

    def __init__(self, channels, stride):
        super().__init__()
        self.stride = stride
        self.conv = nn.Conv2d(channels, channels, stride, stride=stride)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ShapeError(f"{h}x{w} feature not divisible by stride {self.stride}")
        return self.conv(x)


class FeatureMapping(nn.Module):
    """Bilinear upsample back to the stage resolution, then 3x3 conv, BN, ReLU."""

    def __init__(self, channels):
        super().__init__()
        self.block = ConvBNReLU(channels, channels)

    def forward(self, y, size):
        y = F.interpolate(y, size=tuple(size), mode="bilinear", align_corners=False)
        return self.block(y)


class DCBL(nn.Sequential):
    """Two (3x3 conv, BN, ReLU) layers."""

    def __init__(self, in_channels, out_channels):
        super().__init__(ConvBNReLU(in_channels, out_channels), ConvBNReLU(out_channels, out_channels))


class ShallowModule(nn.Module):
    def __init__(self, channels, cfg: ModelConfig):
        super().__init__()
        self.attention = ShallowAttention(channels, cfg.strip_kernels, cfg.temperature,
                                          cfg.heads, cfg.use_msm)
        self.mdfa = nn.ModuleList(MDFA(c, cfg.use_pam, cfg.pam_max_tokens) for c in channels)

    def forward(self, es):
        ys = self.attention(es)
        return [m(y, e) for m, y, e in zip(self.mdfa, ys, es)]


class DeepModule(nn.Module):
    def __init__(self, channels, cfg: ModelConfig):
        super().__init__()
        self.attention = DeepAttention(channels, cfg.strip_kernels, cfg.temperature,
                                       cfg.heads, cfg.use_msm)
        self.mdfa = MDFA(channels, cfg.use_pam, cfg.pam_max_tokens)

    def forward(self, e):
        return self.mdfa(self.attention(e), e)


@dataclass
class QkvBundle:
    queries: list[torch.Tensor]
    key: torch.Tensor
    value: torch.Tensor
    deep: list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]


def _guard(name, t):
    if not torch.isfinite(t).all():
        raise NonFiniteError(name)
    return t


class SDSNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = cfg = config
        chans, scales = cfg.stage_channels, cfg.scales
        n_sh = cfg.shallow_layers
        self.backbone = Backbone(cfg.in_channels, chans, scales, cfg.residual_blocks)

        self.align = nn.ModuleList()
        self.mapping = nn.ModuleList()
        branch_stages = []
        if cfg.shallow_branch:
            branch_stages += range(n_sh)
        if cfg.deep_branch:
            branch_stages += range(n_sh, cfg.num_stages)
        self.branch_stages = tuple(branch_stages)
        for i in branch_stages:
            self.align.append(ScaleAlign(chans[i], cfg.patch_strides[i]))
            self.mapping.append(FeatureMapping(chans[i]))
        self.shallow = ShallowModule(chans[:n_sh], cfg) if cfg.shallow_branch else None
        self.deep = (nn.ModuleList(DeepModule(c, cfg) for c in chans[n_sh:])
                     if cfg.deep_branch else None)

        # decoder from the deepest stage upward; fusion[j] builds F_j
        self.fusion = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for j in range(cfg.num_stages - 1):
            shallow_c, deep_c = chans[j], chans[j + 1]
            if cfg.fusion == "adsf":
                self.fusion.append(ADSF(shallow_c, deep_c, cfg.bandwidth_k, cfg.learnable_fusion))
            else:
                self.fusion.append(ConcatFusion())
            self.decoder.append(DCBL(shallow_c + deep_c, shallow_c))

        if cfg.deep_supervision:
            self.heads = nn.ModuleList(PredictionHead(c) for c in chans)
            self.fuse = FusionHead(cfg.num_stages)
        else:
            self.heads = nn.ModuleList([PredictionHead(chans[0])])
            self.fuse = None

    # -- stage-level pieces -------------------------------------------------

    def encode(self, image):
        expected = (self.config.in_channels, *self.config.input_size)
        if tuple(image.shape[1:]) != expected:
            raise ShapeError(f"input {tuple(image.shape[1:])} does not match config {expected}")
        return [_guard(f"backbone stage {i + 1}", x) for i, x in enumerate(self.backbone(image))]

    def aligned(self, xs):
        return {i: _guard(f"scale align {i + 1}", a(xs[i])) for a, i in zip(self.align, self.branch_stages)}

    def build_qkv(self, es):
        cfg = self.config
        n_sh = cfg.shallow_layers
        qs, k, v = self.shallow.attention.qkv([es[i] for i in range(n_sh)])
        deep = [m.attention.qkv(es[n_sh + j]) for j, m in enumerate(self.deep)]
        return QkvBundle(qs, k, v, deep)

    def branches(self, es):
        """Branch outputs at the patch grid, keyed by stage index."""
        n_sh = self.config.shallow_layers
        out = {}
        if self.shallow is not None:
            for i, y in enumerate(self.shallow([es[i] for i in range(n_sh)])):
                out[i] = _guard(f"shallow module stage {i + 1}", y)
        if self.deep is not None:
            for j, m in enumerate(self.deep):
                out[n_sh + j] = _guard(f"deep module stage {n_sh + j + 1}", m(es[n_sh + j]))
        return out

    def reconstruct(self, xs, ys):
        ds = list(xs)
        for fm, i in zip(self.mapping, self.branch_stages):
            ds[i] = _guard(f"feature mapping {i + 1}", xs[i] + fm(ys[i], xs[i].shape[-2:]))
        return ds

    def decode(self, ds):
        fs = [None] * len(ds)
        prev = ds[-1]
        for j in range(len(ds) - 2, -1, -1):
            up = F.interpolate(prev, size=ds[j].shape[-2:], mode="bilinear", align_corners=False)
            fused = _guard(f"fusion {j + 1}", self.fusion[j](ds[j], up))
            fs[j] = _guard(f"decoder {j + 1}", self.decoder[j](fused))
            prev = fs[j]
        return fs

    # -- full pass ----------------------------------------------------------

    def forward(self, image, return_features=False):
        xs = self.encode(image)
        es = self.aligned(xs)
        ys = self.branches(es)
        ds = self.reconstruct(xs, ys)
        fs = self.decode(ds)
        size = image.shape[-2:]
        if self.fuse is not None:
            sources = fs[:-1] + [ds[-1]]
            logits = [_guard(f"head T{i + 1}", h(s)) for i, (h, s) in enumerate(zip(self.heads, sources))]
            side = [torch.sigmoid(z) for z in logits]
            fused_logit = _guard("fusion head", self.fuse(side, size))
            preds = PredictionSet(side, torch.sigmoid(fused_logit), logits + [fused_logit])
        else:
            src = fs[0] if len(fs) > 1 else ds[0]
            z = _guard("head T1", self.heads[0](src))
            preds = PredictionSet([], torch.sigmoid(z), [z])
        if return_features:
            feats = {}
            for i, x in enumerate(xs):
                feats[f"X{i + 1}"] = x
                feats[f"D{i + 1}"] = ds[i]
            for i, e in es.items():
                feats[f"E{i + 1}"] = e
            for i, f in enumerate(fs[:-1]):
                feats[f"F{i + 1}"] = f
            preds.features = feats
        return preds

    @torch.no_grad()
    def predict(self, image):
        """Fused probability map in eval mode."""
        was_training = self.training
        self.eval()
        try:
            return self(image).fused
        finally:
            self.train(was_training)

    def num_parameters(self):
        return sum(p.numel() for p in self.parameters())


def build_model(config: ModelConfig | None = None, **overrides) -> SDSNet:
    if config is None:
        config = ModelConfig(**overrides)
    elif overrides:
        config = ModelConfig.from_dict({**config.to_dict(), **overrides})
    return SDSNet(config)
