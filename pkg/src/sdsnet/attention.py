"""Multi-scale mapping and channel-wise (transposed) attention.

Affinities are computed between channels: for queries ``Q [C_q, N]`` and keys
``K [C_k, N]`` over ``N`` flattened pixels the attention matrix is
``C_q x C_k``, so cost grows with channels, not with image area.
"""
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NonFiniteError, ShapeError
from .layers import LayerNorm2d, ReflectConv2d


class StripConv(nn.Module):
    """Parallel depthwise ``1 x k`` and ``k x 1`` convolutions, summed.

    The impulse response is a cross of half-width ``(k - 1) // 2``.
    """

    def __init__(self, channels, k):
        super().__init__()
        self.horizontal = ReflectConv2d(channels, channels, (1, k), groups=channels, bias=False)
        self.vertical = ReflectConv2d(channels, channels, (k, 1), groups=channels, bias=False)

    def forward(self, x):
        return self.horizontal(x) + self.vertical(x)


class MultiScaleMapping(nn.Module):
    """LayerNorm, a sum of strip-convolution pairs, then a 1x1 mix.

    With ``use_strips=False`` the strip convolutions are dropped and only the
    normalized 1x1 projection remains (the "without MSM" ablation).
    """

    def __init__(self, channels, kernels=(7, 11, 21), use_strips=True):
        super().__init__()
        self.norm = LayerNorm2d(channels)
        self.strips = nn.ModuleList(StripConv(channels, k) for k in kernels) if use_strips else None
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        x = self.norm(x)
        if self.strips is not None:
            x = sum(strip(x) for strip in self.strips)
        return self.proj(x)


def channel_affinity(q, k, temperature, heads=1, eps=1e-5):
    """Row-stochastic channel affinity ``softmax(IN(q k^T / temperature))``.

    ``q``: [B, Cq, N], ``k``: [B, Ck, N]. Instance normalization treats each
    (sample, head) affinity matrix as one single-channel 2-D map.
    Returns [B, heads, Cq/heads, Ck/heads].
    """
    if not torch.all(temperature > 0):
        raise ValueError(f"temperature must be positive, got {temperature}")
    b, cq, n = q.shape
    ck = k.shape[1]
    if k.shape[2] != n:
        raise ShapeError(f"query has {n} positions, key has {k.shape[2]}")
    if heads == 1:
        scores = torch.bmm(q, k.transpose(1, 2)).unsqueeze(1)
    else:
        qh = q.reshape(b, heads, cq // heads, n)
        kh = k.reshape(b, heads, ck // heads, n)
        scores = torch.matmul(qh, kh.transpose(-1, -2))
    scores = scores / temperature
    scores = F.instance_norm(scores.flatten(0, 1).unsqueeze(1), eps=eps)
    scores = scores.reshape(b, heads, scores.shape[-2], scores.shape[-1])
    if not torch.isfinite(scores).all():
        raise NonFiniteError("attention softmax input")
    return scores.softmax(dim=-1)


class Temperature(nn.Module):
    """Positive scalar, learnable through ``exp(log_value)`` or fixed."""

    def __init__(self, init, learnable=True):
        super().__init__()
        log_value = torch.tensor(math.log(init))
        if learnable:
            self.log_value = nn.Parameter(log_value)
        else:
            self.register_buffer("log_value", log_value)

    def forward(self):
        return self.log_value.exp()


class ChannelCrossAttention(nn.Module):
    """Attention of ``C_q`` query channels over ``C_k`` key/value channels.

    Used as cross-attention for the shallow stages (keys/values are the
    concatenated shallow features) and as self-attention for deep stages
    (``C_q == C_k``). Output is the attended values mixed by a 1x1 conv.
    """

    def __init__(self, query_channels, key_channels, temperature="learnable", heads=1):
        super().__init__()
        if heads > 1 and (query_channels % heads or key_channels % heads):
            raise ValueError(f"{heads} heads do not divide {query_channels}/{key_channels} channels")
        self.heads = heads
        if temperature == "learnable":
            self.temperature = Temperature(math.sqrt(key_channels), learnable=True)
        else:
            self.temperature = Temperature(float(temperature), learnable=False)
        self.proj = nn.Conv2d(query_channels, query_channels, 1)

    def affinity(self, q, k):
        return channel_affinity(q.flatten(2), k.flatten(2), self.temperature(), self.heads)

    def forward(self, q, k, v):
        b, c, h, w = q.shape
        attn = self.affinity(q, k)
        vf = v.flatten(2)
        if self.heads == 1:
            out = torch.bmm(attn.squeeze(1), vf)
        else:
            vh = vf.reshape(b, self.heads, vf.shape[1] // self.heads, -1)
            out = torch.matmul(attn, vh).reshape(b, c, -1)
        return self.proj(out.reshape(b, c, h, w))


class ShallowAttention(nn.Module):
    """Query/key/value construction and cross-attention for the shallow stages.

    Keys and values come from the channel concatenation of all shallow inputs
    through two independent mappings; every stage gets its own query mapping.
    """

    def __init__(self, channels, kernels=(7, 11, 21), temperature="learnable", heads=1, use_msm=True):
        super().__init__()
        total = sum(channels)
        self.channels = tuple(channels)
        self.query_maps = nn.ModuleList(MultiScaleMapping(c, kernels, use_msm) for c in channels)
        self.key_map = MultiScaleMapping(total, kernels, use_msm)
        self.value_map = MultiScaleMapping(total, kernels, use_msm)
        self.attn = nn.ModuleList(
            ChannelCrossAttention(c, total, temperature, heads) for c in channels)

    def qkv(self, es):
        if tuple(e.shape[1] for e in es) != self.channels:
            raise ShapeError(f"expected channels {self.channels}, got {tuple(e.shape[1] for e in es)}")
        cat = torch.cat(es, dim=1)
        qs = [m(e) for m, e in zip(self.query_maps, es)]
        return qs, self.key_map(cat), self.value_map(cat)

    def forward(self, es):
        qs, k, v = self.qkv(es)
        return [attn(q, k, v) for attn, q in zip(self.attn, qs)]


class DeepAttention(nn.Module):
    """Self-attention over the channels of one deep stage."""

    def __init__(self, channels, kernels=(7, 11, 21), temperature="learnable", heads=1, use_msm=True):
        super().__init__()
        self.channels = channels
        self.query_map = MultiScaleMapping(channels, kernels, use_msm)
        self.key_map = MultiScaleMapping(channels, kernels, use_msm)
        self.value_map = MultiScaleMapping(channels, kernels, use_msm)
        self.attn = ChannelCrossAttention(channels, channels, temperature, heads)

    def qkv(self, e):
        if e.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {e.shape[1]}")
        return self.query_map(e), self.key_map(e), self.value_map(e)

    def forward(self, e):
        return self.attn(*self.qkv(e))


def msca(q, k, v, temperature, proj=None):
    """Functional single-head cross-attention on [B, C, h, w] tensors."""
    b, c, h, w = q.shape
    t = torch.as_tensor(temperature, dtype=q.dtype)
    attn = channel_affinity(q.flatten(2), k.flatten(2), t).squeeze(1)
    out = torch.bmm(attn, v.flatten(2)).reshape(b, c, h, w)
    return proj(out) if proj is not None else out


mssa = msca

