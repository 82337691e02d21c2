"""End-to-end semi-supervised optimisation, gradient checks and weight grid search."""

from __future__ import annotations

import copy
import csv
import itertools
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import ColumnSpec, LabelMask, LossWeights, ModelConfig, Trial, apply_label_mask
from .gradcheck import check_gradients
from .losses import LossBreakdown, cross_entropy, total_loss, update_centers
from .model import SSDA, init_params

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 250
    lr: float = 1e-5
    batch_size: int = 32
    val_fraction: float = 0.10
    seed: int = 0
    center_alpha: float = 0.5
    min_labeled_per_batch: int = 0
    ds_normalize: bool = True
    ds_pair_budget: int = 0
    mse_reduction: str = "sum"
    precision: str = "float32"
    track_train_accuracy: bool = False
    grid_values: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    grid_full_factorial: bool = False
    grid_cap: int = 0

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.mse_reduction not in ("sum", "mean"):
            raise ValueError("mse_reduction must be 'sum' or 'mean'")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}")

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.precision]


@dataclass
class EpochRecord:
    epoch: int
    losses: dict[str, float]
    val_accuracy: float
    val_ce: float
    train_accuracy: float | None
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_checkpoint: str | None = None
    val_ids: tuple[str, ...] = ()

    @property
    def best(self) -> EpochRecord:
        return self.epochs[self.best_epoch]

    def write_csv(self, path: str | Path) -> None:
        names = LossBreakdown.field_names()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", *names, "val_accuracy", "val_ce", "train_accuracy", "seconds"])
            for r in self.epochs:
                w.writerow([r.epoch, *(repr(r.losses[n]) for n in names), repr(r.val_accuracy), repr(r.val_ce),
                            "" if r.train_accuracy is None else repr(r.train_accuracy), f"{r.seconds:.4f}"])


def stack_trials(trials: Sequence[Trial], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """(N, C, T) data and (N,) labels with -1 for missing labels."""
    x = torch.from_numpy(np.stack([t.data for t in trials]).astype(np.float64)).to(dtype)
    y = torch.tensor([-1 if t.label is None else t.label for t in trials], dtype=torch.long)
    return x, y


@torch.no_grad()
def predict(model: SSDA, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Class probabilities in eval mode."""
    model.eval()
    out = [model(x[i:i + batch_size], decode=False).probs for i in range(0, len(x), batch_size)]
    return torch.cat(out) if out else torch.empty(0, model.cfg.class_count)


def make_batches(labeled: np.ndarray, batch_size: int, rng: np.random.Generator, min_labeled: int = 0) -> list[np.ndarray]:
    """Shuffled partition of range(len(labeled)) into batches; the last partial batch is kept.

    With ``min_labeled`` the labeled members are dealt round-robin first so each
    batch gets at least that many while supplies last.
    """
    n = len(labeled)
    order = rng.permutation(n)
    if not min_labeled:
        return [order[i:i + batch_size] for i in range(0, n, batch_size)]
    count = -(-n // batch_size)
    lab = [i for i in order if labeled[i]]
    unl = [i for i in order if not labeled[i]]
    batches: list[list[int]] = [[] for _ in range(count)]
    sizes = [min(batch_size, n - b * batch_size) for b in range(count)]
    quota = [min(min_labeled, s) for s in sizes]
    lab_iter = iter(lab)
    for _ in range(max(quota)):  # deal one labeled trial per batch per round
        for b in range(count):
            if len(batches[b]) < quota[b]:
                nxt = next(lab_iter, None)
                if nxt is not None:
                    batches[b].append(nxt)
    rest = list(lab_iter) + unl
    rng.shuffle(rest)
    for b in range(count):
        while len(batches[b]) < sizes[b]:
            batches[b].append(rest.pop())
    return [np.asarray(rng.permutation(b)) for b in batches]


def _split_validation(ids, labels, labeled, fraction, seed):
    lab_idx = np.flatnonzero(labeled)
    if len(lab_idx) == 0:
        raise ValueError("no labeled trials: validation accuracy is undefined")
    if len(lab_idx) < 2:
        log.warning("only one labeled trial; validating on the training trial")
        return lab_idx, np.arange(len(ids))
    val_mask = apply_label_mask([ids[i] for i in lab_idx], fraction, seed, [int(labels[i]) for i in lab_idx])
    val = np.array([i for i in lab_idx if ids[i] in val_mask.labeled_ids])
    keep = np.setdiff1d(np.arange(len(ids)), val)
    return val, keep


def train(trials: Sequence[Trial], mask: LabelMask, model_cfg: ModelConfig, train_cfg: TrainConfig,
          weights: LossWeights, log_path: str | Path | None = None) -> tuple[SSDA, TrainHistory]:
    """Jointly optimise the auto-encoder and classifier.

    Every batch contributes the unsupervised terms over all members and the
    supervised terms over labeled members. Returns the model restored to the
    epoch with the best validation accuracy (ties go to lower validation CE).
    """
    if not trials:
        raise ValueError("empty training set")
    dtype = train_cfg.dtype
    ids = [t.trial_id for t in trials]
    x_all, y_all = stack_trials(trials, dtype)
    labeled_all = np.array([mask.is_labeled(t.trial_id) and t.label is not None for t in trials])
    val_idx, fit_idx = _split_validation(ids, y_all.numpy(), labeled_all, train_cfg.val_fraction, train_cfg.seed)
    x_val, y_val = x_all[val_idx], y_all[val_idx]
    x, y = x_all[fit_idx], y_all[fit_idx]
    labeled = torch.from_numpy(labeled_all[fit_idx])

    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    pair_gen = torch.Generator().manual_seed(train_cfg.seed + 1)
    model = init_params(model_cfg, train_cfg.seed, dtype)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    decode = any(weights.beta)
    history = TrainHistory(val_ids=tuple(ids[i] for i in val_idx))
    best_key, best_state = None, None
    names = LossBreakdown.field_names()

    for ep in range(train_cfg.epochs):
        t0 = time.perf_counter()
        model.train()
        sums = dict.fromkeys(names, 0.0)
        batches = make_batches(labeled.numpy(), train_cfg.batch_size, rng, train_cfg.min_labeled_per_batch)
        for b in batches:
            b = torch.from_numpy(b)
            xb, yb, lb = x[b], y[b], labeled[b]
            out = model(xb, decode=decode)
            parts = total_loss(out, xb, yb, lb, model.centers, weights, model.l2_penalty(),
                               train_cfg.ds_normalize, train_cfg.ds_pair_budget, pair_gen,
                               train_cfg.mse_reduction)
            opt.zero_grad(set_to_none=False)
            parts.total.backward()
            opt.step()
            if lb.any():
                model.centers.copy_(update_centers(model.centers, out.features.detach()[lb], yb[lb],
                                                   train_cfg.center_alpha))
            for k, v in parts.floats().items():
                sums[k] += v
        probs = predict(model, x_val)
        val_acc = float((probs.argmax(1) == y_val).double().mean())
        val_ce = float(cross_entropy(probs, y_val))
        train_acc = None
        if train_cfg.track_train_accuracy and labeled.any():
            p = predict(model, x[labeled])
            train_acc = float((p.argmax(1) == y[labeled]).double().mean())
        rec = EpochRecord(ep, {k: v / len(batches) for k, v in sums.items()}, val_acc, val_ce, train_acc,
                          time.perf_counter() - t0)
        history.epochs.append(rec)
        key = (val_acc, -val_ce)
        if best_key is None or key > best_key:
            best_key, best_state = key, copy.deepcopy(model.state_dict())
            history.best_epoch = ep
        log.debug("epoch %d total=%.4g val_acc=%.3f", ep, rec.losses["total"], val_acc)
    model.load_state_dict(best_state)
    model.eval()
    if log_path is not None:
        history.write_csv(log_path)
    return model, history


# ---------------------------------------------------------------- gradient checks

GRAD_SELECTORS = ("ce", "center", "mse", "ds", "total", "outputs")


def miniature_config(channels: int = 4, window: int = 20, classes: int = 2) -> ModelConfig:
    """Small float64-friendly config with every dropout disabled."""
    cols = (
        ColumnSpec(3, 5, 4, 0.0, 4, 0.0, 6, 0.0, 2, 3, 2),
        ColumnSpec(2, 3, 3, 0.0, 3, 0.0, 4, 0.0, 2, 2, 2),
    )
    return ModelConfig(channel_count=channels, window_len=window, step=10, upsample_rows=2, class_count=classes,
                       columns=cols, fc_hidden=6)


def _zero_dropout(cfg: ModelConfig) -> ModelConfig:
    cols = tuple(replace(c, dropout=0.0, lstm_dropout=0.0, dec_lstm_dropout=0.0) for c in cfg.columns)
    return replace(cfg, columns=cols)


def grad_check(model_cfg: ModelConfig | None = None, selector: str = "total", eps: float = 1e-6,
               tolerance: float = 1e-4, seed: int = 0, batch: int = 6, windows: int = 3,
               weights: LossWeights | None = None, max_entries: int | None = 64) -> dict[str, float]:
    """Max relative error between autograd and central differences per parameter tensor.

    Runs in float64 and train mode (batch statistics) with dropout disabled.
    ``selector`` picks the scalar: one loss term, the composite total, or
    ``"outputs"`` (sum of every model output).
    """
    if eps <= 0:
        raise ValueError("degenerate step: eps must be > 0")
    if selector not in GRAD_SELECTORS:
        raise ValueError(f"unknown selector {selector!r}; choose from {GRAD_SELECTORS}")
    cfg = _zero_dropout(model_cfg or miniature_config())
    M = len(cfg.columns)
    weights = weights or LossWeights(beta=(0.2,) * M, eta=(0.1,) * M, gamma=0.3)
    gen = torch.Generator().manual_seed(seed)
    model = init_params(cfg, seed, torch.float64)
    model.train()
    T = cfg.window_len + (windows - 1) * cfg.step
    x = torch.randn(batch, cfg.channel_count, T, generator=gen, dtype=torch.float64)
    y = torch.randint(0, cfg.class_count, (batch,), generator=gen)
    labeled = torch.arange(batch) % 2 == 0
    with torch.no_grad():
        model.centers.copy_(torch.rand(model.centers.shape, generator=gen, dtype=torch.float64))

    probe = {}

    def scalar():
        out = model(x)
        if selector == "outputs":
            # fixed random weights per output; a plain sum is invariant to several parameters
            heads = [out.probs, out.logits, out.features, out.concat, *out.recon, *out.alpha]
            if not probe:
                probe.update({i: torch.randn(h.shape, generator=gen, dtype=h.dtype) for i, h in enumerate(heads)})
            return sum((probe[i] * h).sum() for i, h in enumerate(heads))
        parts = total_loss(out, x, y, labeled, model.centers, weights, model.l2_penalty())
        if selector == "total":
            return parts.total
        return getattr(parts, selector)

    tensors = dict(model.named_parameters())
    report = check_gradients(scalar, tensors, eps=eps, max_entries=max_entries, seed=seed)
    return report


def grad_check_passes(report: dict[str, float], tolerance: float = 1e-4) -> bool:
    return max(report.values(), default=0.0) < tolerance


# ---------------------------------------------------------------- grid search

@dataclass(frozen=True)
class GridRow:
    weights: LossWeights
    val_accuracy: float


def weight_grid(values: Sequence[float], columns: int, full_factorial: bool = False) -> list[LossWeights]:
    """Per-column-shared (beta, eta, gamma) triples, or the full per-column product."""
    if full_factorial:
        combos = itertools.product(*([values] * (2 * columns + 1)))
        return [LossWeights(tuple(c[:columns]), tuple(c[columns:2 * columns]), c[-1]) for c in combos]
    return [LossWeights((b,) * columns, (e,) * columns, g) for b, e, g in itertools.product(values, repeat=3)]


def _grid_key(row: GridRow):
    w = row.weights
    return (-row.val_accuracy, round(w.total, 12), w.beta, w.eta, w.gamma)


def grid_search(trials: Sequence[Trial], mask: LabelMask, model_cfg: ModelConfig, train_cfg: TrainConfig,
                values: Sequence[float] | None = None, full_factorial: bool | None = None,
                cap: int | None = None) -> tuple[LossWeights, list[GridRow]]:
    """Train once per weight combination and keep the best validation accuracy.

    Ties go to the smallest total weight, then lexicographic (beta, eta, gamma).
    ``cap`` limits how many combinations (in grid order) are evaluated.
    """
    values = tuple(train_cfg.grid_values if values is None else values)
    if not values:
        raise ValueError("empty grid")
    full = train_cfg.grid_full_factorial if full_factorial is None else full_factorial
    grid = weight_grid(values, len(model_cfg.columns), full)
    cap = train_cfg.grid_cap if cap is None else cap
    if cap:
        grid = grid[:cap]
    rows = []
    for w in grid:
        _, hist = train(trials, mask, model_cfg, train_cfg, w)
        rows.append(GridRow(w, hist.best.val_accuracy))
    best = min(rows, key=_grid_key)
    return best.weights, rows
