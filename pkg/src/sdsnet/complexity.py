"""Parameter and multiply-add accounting.

Multiply-adds count convolutions (including the 1x1 heads and MLPs) and the
matrix products inside the attention blocks; normalization, activations,
pooling and interpolation are not counted.
"""
from collections import OrderedDict

import torch
import torch.nn as nn

from .attention import ChannelCrossAttention
from .mdfa import PositionAttention


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def parameter_breakdown(model):
    out = OrderedDict()
    for name, child in model.named_children():
        n = count_parameters(child)
        if n:
            out[name] = n
    return out


def _conv_macs(module, inputs, output):
    kh, kw = module.kernel_size if isinstance(module, nn.Conv2d) else (module.kernel_size[0], 1)
    per_out = (module.in_channels // module.groups) * kh * kw
    return output.numel() // output.shape[0] * per_out


def estimate_macs(model, input_size=None):
    """Multiply-adds for one image of ``input_size`` (defaults to the config's)."""
    cfg = model.config
    h, w = input_size or cfg.input_size
    totals = OrderedDict((name, 0) for name, _ in model.named_children())
    hooks = []

    def hook_for(top):
        def hook(module, inputs, output):
            if isinstance(module, (nn.Conv2d, nn.Conv1d)):
                totals[top] += _conv_macs(module, inputs, output)
            elif isinstance(module, ChannelCrossAttention):
                q, k, v = inputs
                n = q.shape[-2] * q.shape[-1]
                # q k^T and attn v
                totals[top] += q.shape[1] * k.shape[1] * n // module.heads * 2
            elif isinstance(module, PositionAttention):
                c, n = inputs[0].shape[1], inputs[0].shape[-2] * inputs[0].shape[-1]
                totals[top] += n * n * module.query.out_channels + n * n * c
        return hook

    for top, child in model.named_children():
        for m in child.modules():
            if isinstance(m, (nn.Conv2d, nn.Conv1d, ChannelCrossAttention, PositionAttention)):
                hooks.append(m.register_forward_hook(hook_for(top)))
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        with torch.no_grad():
            model(torch.zeros(1, cfg.in_channels, h, w, dtype=dtype))
    finally:
        for hk in hooks:
            hk.remove()
        model.train(was_training)
    return OrderedDict((k, v) for k, v in totals.items() if v)


def summary(model):
    params = parameter_breakdown(model)
    macs = estimate_macs(model)
    rows = []
    for name in dict.fromkeys(list(params) + list(macs)):
        rows.append({"module": name, "params": params.get(name, 0), "macs": macs.get(name, 0)})
    return {
        "params": count_parameters(model),
        "macs": sum(macs.values()),
        "input_size": list(model.config.input_size),
        "breakdown": rows,
    }
