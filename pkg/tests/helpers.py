"""Central-difference gradient oracle shared by the gradient tests."""
import numpy as np
import torch


def _leaves(inputs, module):
    params = [p for p in module.parameters() if p.requires_grad] if module is not None else []
    return list(inputs) + params


def gradient_check(fn, inputs, module=None, n_coords=100, step=1e-5, floor=1e-6, seed=0, stats=None):
    """Max relative error between autograd and central differences.

    ``fn(*inputs)`` returns a tensor (or list of tensors); the scalar checked
    is its inner product with fixed random weights. Coordinates are drawn
    uniformly over all inputs and trainable parameters of ``module``.

    The numeric derivative Richardson-combines central differences at ``step``
    and ``step / 2``. A coordinate is only scored when differences at
    ``step``, ``step / 2`` and ``step / 4`` converge at the second-order rate;
    otherwise a ReLU or max kink lies within ``step`` and the coordinate is
    replaced by the next random one. More than 10% skipped raises. Pass a
    dict as ``stats`` to receive ``checked`` and ``skipped`` counts.
    """
    rng = np.random.default_rng(seed)
    inputs = [x.detach().double().requires_grad_(True) for x in inputs]
    if module is not None:
        module.double().eval()
    leaves = _leaves(inputs, module)

    with torch.no_grad():
        outs = fn(*inputs)
    outs = outs if isinstance(outs, (list, tuple)) else [outs]
    gen = torch.Generator().manual_seed(seed)
    weights = [torch.randn(o.shape, generator=gen, dtype=torch.float64) / o.numel() ** 0.5 for o in outs]

    def scalar():
        o = fn(*inputs)
        o = o if isinstance(o, (list, tuple)) else [o]
        return sum((a * w).sum() for a, w in zip(o, weights))

    value = scalar()
    grads = torch.autograd.grad(value, leaves, allow_unused=True)
    # cancellation noise of a central difference at the finest step
    magnitude = sum(float((o * w).abs().sum()) for o, w in zip(outs, weights))
    noise = 10 * np.finfo(np.float64).eps * magnitude / (step / 4)
    sizes = np.array([t.numel() for t in leaves])
    order = rng.permutation(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    target = min(n_coords, sizes.sum())
    worst, checked, skipped = 0.0, 0, 0
    for f in order:
        if checked == target:
            break
        li = int(np.searchsorted(offsets, f, side="right") - 1)
        idx = int(f - offsets[li])
        view = leaves[li].data.view(-1)
        orig = view[idx].item()

        def central(h):
            with torch.no_grad():
                view[idx] = orig + h
                up = scalar().item()
                view[idx] = orig - h
                down = scalar().item()
                view[idx] = orig
            return (up - down) / (2 * h)

        d1, d2, d4 = central(step), central(step / 2), central(step / 4)
        coarse, fine = d1 - d2, d2 - d4
        if abs(coarse - 4 * fine) > 0.5 * abs(coarse) + noise:
            skipped += 1
            if skipped > 0.1 * target:
                raise AssertionError(f"{skipped} coordinates straddle kinks; check is not informative")
            continue
        numeric = (4 * d2 - d1) / 3
        g = grads[li]
        analytic = 0.0 if g is None else g.reshape(-1)[idx].item()
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
        checked += 1
    if stats is not None:
        stats.update(checked=checked, skipped=skipped)
    return worst
