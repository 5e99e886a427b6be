import torch
import torch.nn as nn
import torch.nn.functional as F


def _reflect_index(n, before, after, device):
    # mirror without repeating the edge sample, valid for any pad width
    idx = torch.arange(-before, n + after, device=device)
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * (n - 1)
    idx = idx.remainder(period)
    return torch.where(idx >= n, period - idx, idx)


def reflect_pad2d(x, left, right, top, bottom):
    """Reflective padding of the last two dims.

    Matches ``F.pad(mode="reflect")`` where that is defined and keeps
    reflecting periodically when the pad is wider than the input.
    """
    h, w = x.shape[-2:]
    if max(left, right) < w and max(top, bottom) < h:
        return F.pad(x, (left, right, top, bottom), mode="reflect")
    if top or bottom:
        x = x.index_select(-2, _reflect_index(h, top, bottom, x.device))
    if left or right:
        x = x.index_select(-1, _reflect_index(w, left, right, x.device))
    return x


class ReflectConv2d(nn.Conv2d):
    """``nn.Conv2d`` with 'same' output size via reflective padding."""

    def __init__(self, in_channels, out_channels, kernel_size, dilation=1, groups=1, bias=True):
        super().__init__(in_channels, out_channels, kernel_size, padding=0,
                         dilation=dilation, groups=groups, bias=bias)

    def forward(self, x):
        kh, kw = self.kernel_size
        dh, dw = self.dilation
        ph, pw = dh * (kh - 1) // 2, dw * (kw - 1) // 2
        return super().forward(reflect_pad2d(x, pw, pw, ph, ph))


class LayerNorm2d(nn.LayerNorm):
    """LayerNorm over the channel vector of every pixel of an NCHW tensor."""

    def forward(self, x):
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride,
                      padding=kernel_size // 2, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )


class ResidualBlock(nn.Module):
    """Two 3x3 conv-BN layers with an identity (or 1x1 projection) shortcut."""

    def __init__(self, in_channels, out_channels, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class DoubleConv(nn.Sequential):
    """Plain U-Net stage used when residual blocks are ablated."""

    def __init__(self, in_channels, out_channels, stride=1):
        super().__init__(
            ConvBNReLU(in_channels, out_channels, stride=stride),
            ConvBNReLU(out_channels, out_channels),
        )
