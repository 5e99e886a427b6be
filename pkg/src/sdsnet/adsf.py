"""Adaptive deep-shallow fusion.

Channel descriptors of the shallow map ``F_s`` and the deep map ``F_d`` are
encoded (a band filter along channels for the deep descriptor, a diagonal
scaling for the shallow one), correlated by an outer product, reduced to
row/column sums and mixed by a learnable balance ``theta`` into a per-channel
gate ``W`` in (sigmoid(0), sigmoid(1)). Output: ``concat(F_d, W * F_s)``.
"""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError


def channel_descriptors(fs, fd):
    """Spatial means, [B, C] each."""
    for name, t in (("shallow", fs), ("deep", fd)):
        if t.shape[-1] * t.shape[-2] == 0:
            raise ShapeError(f"{name} feature map has empty spatial extent")
    return fs.mean(dim=(2, 3)), fd.mean(dim=(2, 3))


def band_encode(u, kernel):
    """1-D zero-padded convolution along the channel axis. ``u``: [B, C]."""
    k = kernel.numel()
    if k % 2 == 0:
        raise ValueError(f"band kernel length must be odd, got {k}")
    return F.conv1d(u.unsqueeze(1), kernel.reshape(1, 1, k), padding=k // 2).squeeze(1)


def diag_encode(u, scale):
    return u * scale


def fusion_gate(u_sc, u_dc, theta):
    """Per-channel gate from the shallow/deep encodings.

    Row sums of ``M = u_sc u_dc^T`` weight the shallow side, column sums
    weight the deep side.
    """
    m = u_sc.unsqueeze(2) * u_dc.unsqueeze(1)
    shallow_w = m.sum(dim=2)
    deep_w = m.sum(dim=1)
    g = torch.sigmoid(theta)
    return torch.sigmoid(g * torch.sigmoid(shallow_w) + (1 - g) * torch.sigmoid(deep_w))


class ADSF(nn.Module):
    def __init__(self, shallow_channels, deep_channels, bandwidth=3, learnable_theta=True):
        super().__init__()
        if bandwidth % 2 == 0 or bandwidth < 1:
            raise ValueError(f"bandwidth must be odd and >= 1, got {bandwidth}")
        if bandwidth > shallow_channels:
            raise ValueError(f"bandwidth {bandwidth} exceeds {shallow_channels} channels")
        self.shallow_channels = shallow_channels
        self.deep_channels = deep_channels
        band = torch.zeros(bandwidth)
        band[bandwidth // 2] = 1.0
        self.band = nn.Parameter(band)
        self.diag = nn.Parameter(torch.ones(shallow_channels))
        if learnable_theta:
            self.theta = nn.Parameter(torch.zeros(()))
        else:
            self.register_buffer("theta", torch.zeros(()))
        if deep_channels != shallow_channels:
            self.align = nn.Conv2d(deep_channels, shallow_channels, 1, bias=False)
        else:
            self.align = None

    def channel_encode(self, u):
        """Band and diagonal encodings of one descriptor: ``(U_dc, U_sc)``."""
        return band_encode(u, self.band), diag_encode(u, self.diag)

    def gate(self, fs, fd):
        fd_aligned = self.align(fd) if self.align is not None else fd
        u_s, u_d = channel_descriptors(fs, fd_aligned)
        u_dc = band_encode(u_d, self.band)
        u_sc = diag_encode(u_s, self.diag)
        return fusion_gate(u_sc, u_dc, self.theta)

    def forward(self, fs, fd):
        if fs.shape[1] != self.shallow_channels or fd.shape[1] != self.deep_channels:
            raise ShapeError(
                f"expected {self.shallow_channels}/{self.deep_channels} channels, "
                f"got {fs.shape[1]}/{fd.shape[1]}")
        if fs.shape[-2:] != fd.shape[-2:]:
            raise ShapeError(f"spatial mismatch {tuple(fs.shape[-2:])} vs {tuple(fd.shape[-2:])}")
        w = self.gate(fs, fd)
        return torch.cat([fd, w[:, :, None, None] * fs], dim=1)


class ConcatFusion(nn.Module):
    """Ungated ``concat(F_d, F_s)``."""

    def forward(self, fs, fd):
        if fs.shape[-2:] != fd.shape[-2:]:
            raise ShapeError(f"spatial mismatch {tuple(fs.shape[-2:])} vs {tuple(fd.shape[-2:])}")
        return torch.cat([fd, fs], dim=1)
