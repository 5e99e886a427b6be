"""Prediction heads and the multi-level supervision loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, ShapeError

EPS = 1e-7


@dataclass
class PredictionSet:
    """Side maps (finest first, the last comes from the deepest stage) and the
    fused full-resolution map, all probabilities. ``logits`` mirrors ``side``
    followed by the fused logit. ``features`` is filled on request."""

    side: list[torch.Tensor]
    fused: torch.Tensor
    logits: list[torch.Tensor]
    features: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def maps(self):
        """All candidate maps in loss order: side maps then the fused map."""
        return [*self.side, self.fused]

    def __getitem__(self, name):
        # T1..T<n> aliases, T<n+1> is the fused map
        maps = self.maps
        if not (name.startswith("T") and name[1:].isdigit() and 1 <= int(name[1:]) <= len(maps)):
            raise KeyError(name)
        return maps[int(name[1:]) - 1]


@dataclass
class LossBreakdown:
    terms: list[torch.Tensor]
    total: torch.Tensor

    def as_floats(self):
        return [float(t.detach()) for t in self.terms], float(self.total.detach())


class PredictionHead(nn.Module):
    """1x1 conv to one channel. Returns logits; apply sigmoid for probabilities."""

    def __init__(self, channels, prior=0.01):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, 1)
        # targets are a tiny fraction of the pixels; start the heads near that rate
        nn.init.constant_(self.conv.bias, -math.log((1 - prior) / prior))

    def forward(self, x):
        return self.conv(x)


class FusionHead(nn.Module):
    """Upsample side probability maps to full size, concat, 1x1 conv."""

    def __init__(self, num_maps, gain=10.0):
        super().__init__()
        self.conv = nn.Conv2d(num_maps, 1, 1)
        # start as a confident average of the side maps:
        # logit = gain * (mean(T) - 0.5), so all-zero maps give sigmoid(-gain / 2)
        with torch.no_grad():
            self.conv.weight.fill_(gain / num_maps)
            self.conv.bias.fill_(-gain / 2)

    def forward(self, maps, size):
        if maps[0].shape[-2:] != tuple(size):
            raise ShapeError(f"finest side map is {tuple(maps[0].shape[-2:])}, expected {tuple(size)}")
        ups = [maps[0]]
        for m in maps[1:]:
            if m.shape[-2] > size[0] or m.shape[-1] > size[1]:
                raise ShapeError(f"side map {tuple(m.shape[-2:])} is larger than output {tuple(size)}")
            ups.append(upsample(m, size))
        return self.conv(torch.cat(ups, dim=1))


def upsample(x, size):
    if x.shape[-2:] == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def bce(prob, target, eps=EPS):
    """Mean binary cross-entropy of probabilities clipped to [eps, 1 - eps]."""
    p = prob.clamp(eps, 1 - eps)
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


def mse(prob, target):
    return ((prob - target) ** 2).mean()


def check_mask(mask):
    if not torch.all((mask == 0) | (mask == 1)):
        raise DataError("ground-truth mask must contain only 0 and 1")


def total_loss(preds: PredictionSet, mask, weights=None, kind="bce"):
    """Per-map losses against the full-resolution mask and their weighted sum.

    Coarse side maps are bilinearly upsampled before comparison.
    """
    check_mask(mask)
    if mask.dim() == 3:
        mask = mask.unsqueeze(1)
    mask = mask.to(preds.fused.dtype)
    size = mask.shape[-2:]
    fn = {"bce": bce, "mse": mse}[kind]
    maps = preds.maps
    if weights is None:
        weights = [1.0] * len(maps)
    if len(weights) != len(maps):
        raise ValueError(f"{len(weights)} loss weights for {len(maps)} maps")
    terms = [fn(upsample(m, size), mask) for m in maps]
    total = sum(w * t for w, t in zip(weights, terms))
    return LossBreakdown(terms, total)
