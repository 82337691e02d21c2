"""Central finite-difference checks against autograd gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import torch


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-12) -> float:
    """max|a - n| / max(max|a|, max|n|, floor)."""
    diff = (analytic - numeric).abs().max()
    scale = torch.maximum(analytic.abs().max(), numeric.abs().max()).clamp_min(floor)
    return float(diff / scale)


@torch.no_grad()
def numeric_grad(f: Callable[[], torch.Tensor], x: torch.Tensor, eps: float, max_entries: int | None = None,
                 generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Central differences (f(x+eps) - f(x-eps)) / 2eps for entries of ``x``, perturbed in place.

    Returns (flat indices checked, numeric gradient at those indices).
    """
    if eps <= 0:
        raise ValueError("degenerate step: eps must be > 0")
    flat = x.view(-1)
    idx = torch.arange(flat.numel())
    if max_entries is not None and flat.numel() > max_entries:
        idx = torch.randperm(flat.numel(), generator=generator)[:max_entries].sort().values
    out = torch.empty(idx.numel(), dtype=torch.float64)
    for j, i in enumerate(idx.tolist()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = float(f())
        flat[i] = orig - eps
        down = float(f())
        flat[i] = orig
        out[j] = (up - down) / (2 * eps)
    return idx, out


def check_gradients(f: Callable[[], torch.Tensor], tensors: Mapping[str, torch.Tensor], eps: float = 1e-6,
                    max_entries: int | None = None, seed: int = 0, scale_floor: float = 1e-3) -> dict[str, float]:
    """Relative error between autograd and central differences for each named tensor.

    ``f`` must be a closure recomputing the scalar from the current tensor values.
    The error denominator never drops below ``scale_floor`` times the largest
    analytic gradient entry over all tensors, so tensors whose true gradient is
    zero (e.g. a bias a softmax cancels) are judged on the model's gradient scale.
    """
    if eps <= 0:
        raise ValueError("degenerate step: eps must be > 0")
    leaves = list(tensors.values())
    value = f()
    grads = [torch.zeros_like(t) if g is None else g
             for t, g in zip(leaves, torch.autograd.grad(value, leaves, allow_unused=True))]
    floor = max(scale_floor * max(float(g.abs().max()) for g in grads), 1e-12)
    gen = torch.Generator().manual_seed(seed)
    report = {}
    for (name, t), g in zip(tensors.items(), grads):
        idx, num = numeric_grad(f, t.data, eps, max_entries, gen)
        report[name] = relative_error(g.reshape(-1)[idx].double(), num, floor)
    return report
