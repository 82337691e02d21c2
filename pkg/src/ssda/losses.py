"""Supervised, unsupervised and composite training objectives."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import torch

from .config import LossWeights

PROB_FLOOR = 1e-12
_DIST_FLOOR = 1e-12


def cross_entropy(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the true class. Empty batch -> 0."""
    if labels.numel() == 0:
        return probs.new_zeros(())
    p = probs.gather(1, labels.long().view(-1, 1)).squeeze(1)
    return -torch.log(p.clamp_min(PROB_FLOOR)).mean()


def center_loss(features: torch.Tensor, labels: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    """0.5 * sum_i ||f_i - c_{y_i}||^2 (summed, not averaged)."""
    if labels.numel() and int(labels.max()) >= centers.shape[0]:
        raise ValueError(f"label {int(labels.max())} has no center (K={centers.shape[0]})")
    if labels.numel() == 0:
        return features.new_zeros(())
    diff = features - centers.detach()[labels.long()]
    return 0.5 * diff.pow(2).sum()


@torch.no_grad()
def update_centers(centers: torch.Tensor, features: torch.Tensor, labels: torch.Tensor, alpha: float) -> torch.Tensor:
    """Move each class center present in the batch toward that class's batch mean."""
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    out = centers.clone()
    for k in labels.unique().tolist():
        mean = features[labels == k].mean(dim=0)
        out[k] = centers[k] - alpha * (centers[k] - mean)
    return out


def mse_recon(windows: torch.Tensor, recon: Sequence[torch.Tensor], beta: Sequence[float],
              reduction: str = "sum") -> torch.Tensor:
    """sum_col beta_col * sum over trials, windows, channels, samples of (D - D_hat)^2.

    ``reduction="mean"`` divides each column's sum by the element count.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    total = windows.new_zeros(())
    for b, r in zip(beta, recon, strict=True):
        if r.shape != windows.shape:
            raise ValueError(f"reconstruction shape {tuple(r.shape)} != window shape {tuple(windows.shape)}")
        if b:
            sq = (windows - r).pow(2)
            total = total + b * (sq.sum() if reduction == "sum" else sq.mean())
    return total


def pairwise_distances(x: torch.Tensor) -> torch.Tensor:
    """Euclidean distances between rows of x for the pairs i < j (upper triangle)."""
    i, j = torch.triu_indices(x.shape[0], x.shape[0], offset=1)
    d2 = (x[i] - x[j]).pow(2).sum(dim=-1)
    # sqrt has an infinite slope at 0; coincident points get a zero gradient instead
    safe = torch.where(d2 > _DIST_FLOOR, d2, torch.ones_like(d2))
    return torch.where(d2 > _DIST_FLOOR, safe.sqrt(), torch.zeros_like(d2))


def stress(raw: torch.Tensor, latent: torch.Tensor, normalize: bool = True, pair_budget: int = 0,
           generator: torch.Generator | None = None) -> torch.Tensor:
    """sum over ordered pairs (k, l) of [d(raw_k, raw_l) - d(latent_k, latent_l)]^2.

    ``raw`` is (B, ...) and is flattened per row. With ``normalize`` each
    distance set is divided by its own mean. ``pair_budget > 0`` samples that
    many unordered pairs uniformly without replacement.
    """
    if raw.shape[0] < 2:
        return latent.new_zeros(())
    dh = pairwise_distances(raw.reshape(raw.shape[0], -1).to(latent.dtype))
    dl = pairwise_distances(latent)
    if pair_budget and pair_budget < dh.numel():
        keep = torch.randperm(dh.numel(), generator=generator)[:pair_budget]
        dh, dl = dh[keep], dl[keep]
    if normalize:
        dh = dh / dh.mean().clamp_min(_DIST_FLOOR)
        dl = dl / dl.mean().clamp_min(_DIST_FLOOR)
    # ordered pairs (k, l) and (l, k) contribute equally; k == l contributes 0
    return 2.0 * (dh - dl).pow(2).sum()


def ds_loss(raw: torch.Tensor, latents: Sequence[torch.Tensor], labeled: torch.Tensor, eta: Sequence[float],
            normalize: bool = True, pair_budget: int = 0, generator: torch.Generator | None = None) -> torch.Tensor:
    """Distance-preservation loss per column, pairs drawn within the labeled and within the unlabeled group."""
    total = raw.new_zeros((), dtype=latents[0].dtype)
    for e, v in zip(eta, latents, strict=True):
        if not e:
            continue
        for group in (labeled, ~labeled):
            total = total + e * stress(raw[group], v[group], normalize, pair_budget, generator)
    return total


@dataclass
class LossBreakdown:
    ce: torch.Tensor
    center: torch.Tensor
    supervised: torch.Tensor
    mse: torch.Tensor
    ds: torch.Tensor
    unsupervised: torch.Tensor
    l2_penalty: torch.Tensor
    total: torch.Tensor

    def floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}

    @staticmethod
    def field_names() -> list[str]:
        return [f.name for f in fields(LossBreakdown)]


def total_loss(out, raw: torch.Tensor, labels: torch.Tensor, labeled: torch.Tensor, centers: torch.Tensor,
               weights: LossWeights, l2_penalty: torch.Tensor, ds_normalize: bool = True,
               ds_pair_budget: int = 0, generator: torch.Generator | None = None,
               mse_reduction: str = "sum") -> LossBreakdown:
    """Compose all terms for one batch.

    ``out`` is the model's ForwardOutput, ``raw`` the (B, C, T) input, ``labels``
    a (B,) tensor (ignored where ``labeled`` is False). Supervised terms only see
    labeled members.
    """
    lab = labels[labeled]
    ce = cross_entropy(out.probs[labeled], lab)
    cl = center_loss(out.features[labeled], lab, centers)
    supervised = ce + weights.gamma * cl
    if out.recon:
        mse = mse_recon(out.windows, out.recon, weights.beta, mse_reduction)
    else:
        if any(weights.beta):
            raise ValueError("reconstruction weight set but decoder outputs were skipped")
        mse = out.probs.new_zeros(())
    ds = ds_loss(raw, out.latents, labeled, weights.eta, ds_normalize, ds_pair_budget, generator)
    unsupervised = mse + ds
    total = unsupervised + supervised + l2_penalty
    return LossBreakdown(ce, cl, supervised, mse, ds, unsupervised, l2_penalty, total)
