"""Multidimensional dynamic fusion attention (channel, spatial, position)."""
import warnings

import torch
import torch.nn as nn

from .errors import ShapeError
from .layers import ReflectConv2d


def hidden_width(channels, reduction=8):
    hidden = channels // reduction
    if hidden < 1:
        warnings.warn(f"{channels} channels < {reduction}; hidden width clamped to 1")
        hidden = 1
    return hidden


class ChannelGate(nn.Module):
    """CAM: shared MLP over global average and max pooled ``Y + E``.

    Returns the reweighted map ``(Y + E) * w`` with ``w`` in (0, 1)^C.
    """

    def __init__(self, channels):
        super().__init__()
        hidden = hidden_width(channels)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
        )

    def weights(self, x):
        avg = x.mean(dim=(2, 3), keepdim=True)
        mx = x.amax(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.mlp(avg) + self.mlp(mx))

    def forward(self, y, e):
        if y.shape != e.shape:
            raise ShapeError(f"attention output {tuple(y.shape)} vs residual {tuple(e.shape)}")
        x = y + e
        return x * self.weights(x)


class SpatialGate(nn.Module):
    """SAM: channel-wise max and mean maps, a per-pixel dense layer on each,
    then a 7x7 convolution with dilation 4 down to one channel."""

    def __init__(self, kernel_size=7, dilation=4):
        super().__init__()
        self.dense_max = nn.Conv2d(1, 1, 1)
        self.dense_avg = nn.Conv2d(1, 1, 1)
        self.conv = ReflectConv2d(2, 1, kernel_size, dilation=dilation)

    def forward(self, fc):
        mx = self.dense_max(fc.amax(dim=1, keepdim=True))
        avg = self.dense_avg(fc.mean(dim=1, keepdim=True))
        return self.conv(torch.cat([mx, avg], dim=1))


class PositionAttention(nn.Module):
    """PAM: pixel-to-pixel attention with a residual scale ``alpha`` (starts at 0).

    ``s[x, y] = softmax_x(B_x . Z_y)`` and ``out_y = alpha * sum_x s[x, y] D_x + F_y``.
    """

    def __init__(self, channels, max_tokens=4096):
        super().__init__()
        reduced = hidden_width(channels)
        self.query = nn.Conv2d(channels, reduced, 1)
        self.key = nn.Conv2d(channels, reduced, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.alpha = nn.Parameter(torch.zeros(1))
        self.max_tokens = max_tokens

    def affinity(self, fc):
        """Column-stochastic [B, N, N] affinity of a feature map."""
        b_ = self.query(fc).flatten(2)
        z = self.key(fc).flatten(2)
        return torch.bmm(b_.transpose(1, 2), z).softmax(dim=1)

    def forward(self, fc):
        b, c, h, w = fc.shape
        if h * w > self.max_tokens:
            raise ShapeError(
                f"position attention over {h * w} pixels exceeds the cap of {self.max_tokens}; "
                "use a pooled position-attention variant or raise pam_max_tokens")
        s = self.affinity(fc)
        d = self.value(fc).flatten(2)
        out = torch.bmm(d, s).reshape(b, c, h, w)
        return self.alpha * out + fc


class MDFA(nn.Module):
    """``ReLU(sigmoid(F_P + F_s) * Y)`` with F_s broadcast over channels.

    ``use_pam=False`` drops position attention, so the gate is
    ``sigmoid(F_c + F_s)``.
    """

    def __init__(self, channels, use_pam=True, max_tokens=4096):
        super().__init__()
        self.cam = ChannelGate(channels)
        self.sam = SpatialGate()
        self.pam = PositionAttention(channels, max_tokens) if use_pam else None

    def forward(self, y, e):
        fc = self.cam(y, e)
        fs = self.sam(fc)
        fp = self.pam(fc) if self.pam is not None else fc
        return torch.relu(torch.sigmoid(fp + fs) * y)
