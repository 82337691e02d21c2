"""Subject-independent cross-validation, label-fraction and ablation experiments."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import Fold, LossWeights, ModelConfig, SplitPlan, Trial, apply_label_mask
from .metrics import accuracy, confusion, macro_f1, wilcoxon_exact
from .model import SSDA, save_checkpoint
from .train import TrainConfig, stack_trials, predict, train

log = logging.getLogger(__name__)


class SubjectLeakageError(RuntimeError):
    pass


@dataclass
class FoldResult:
    index: int
    repetition: int
    train_subjects: list[str]
    test_subjects: list[str]
    accuracy: float
    macro_f1: float
    confusion: list[list[float]]  # row-normalised
    counts: list[list[int]]
    n_train: int
    n_labeled: int
    n_unlabeled: int
    n_test: int
    best_epoch: int
    val_accuracy: float


@dataclass
class EvalReport:
    folds: list[FoldResult]
    metadata: dict = field(default_factory=dict)

    def _stat(self, name: str, fn) -> float:
        vals = [getattr(f, name) for f in self.folds]
        return float(fn(vals)) if vals else float("nan")

    @property
    def accuracy_mean(self) -> float:
        return self._stat("accuracy", np.mean)

    @property
    def accuracy_std(self) -> float:
        return self._stat("accuracy", np.std)

    @property
    def f1_mean(self) -> float:
        return self._stat("macro_f1", np.mean)

    @property
    def f1_std(self) -> float:
        return self._stat("macro_f1", np.std)

    def repetition_means(self) -> dict[int, dict[str, float]]:
        """Mean accuracy / F1 per repetition (the 'averaged over repetitions' layout)."""
        out = {}
        for rep in sorted({f.repetition for f in self.folds}):
            fs = [f for f in self.folds if f.repetition == rep]
            out[rep] = {"accuracy": float(np.mean([f.accuracy for f in fs])),
                        "macro_f1": float(np.mean([f.macro_f1 for f in fs]))}
        return out

    def summary(self) -> dict:
        return {"accuracy_mean": self.accuracy_mean, "accuracy_std": self.accuracy_std,
                "f1_mean": self.f1_mean, "f1_std": self.f1_std}

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "folds": [asdict(f) for f in self.folds], "summary": self.summary(),
                "repetitions": {str(k): v for k, v in self.repetition_means().items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls([FoldResult(**f) for f in d["folds"]], d["metadata"])

    def write(self, out_dir: str | Path, stem: str = "report") -> None:
        """JSON report, a per-fold CSV, and one confusion-matrix CSV grid per fold."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json())
        with open(out / f"{stem}_folds.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "repetition", "test_subjects", "accuracy", "macro_f1", "n_train", "n_labeled",
                        "n_unlabeled", "n_test", "best_epoch", "val_accuracy"])
            for f in self.folds:
                w.writerow([f.index, f.repetition, " ".join(f.test_subjects), repr(f.accuracy), repr(f.macro_f1),
                            f.n_train, f.n_labeled, f.n_unlabeled, f.n_test, f.best_epoch, repr(f.val_accuracy)])
        for f in self.folds:
            with open(out / f"{stem}_confusion_fold{f.index}.csv", "w", newline="") as fh:
                csv.writer(fh).writerows([[repr(v) for v in row] for row in f.confusion])


# ---------------------------------------------------------------- variants

ABLATION_FLAGS = ("disable-attention", "disable-lstm", "disable-cnn", "single-column", "disable-center-loss",
                  "disable-ds-loss", "disable-unsupervised")


def parse_variant(name: str) -> list[str]:
    """``"full"`` or flags joined by ``+``; ``single-column-2`` keeps only the second column."""
    if name == "full":
        return []
    flags = name.split("+")
    for f in flags:
        base = "single-column" if f.startswith("single-column-") else f
        if base not in ABLATION_FLAGS:
            raise ValueError(f"unknown ablation flag {f!r}")
    return flags


def apply_variant(cfg: ModelConfig, weights: LossWeights, flags: Sequence[str]) -> tuple[ModelConfig, LossWeights]:
    for f in flags:
        if f == "disable-attention":
            cfg = replace(cfg, use_attention=False)
        elif f == "disable-lstm":
            cfg = replace(cfg, use_lstm=False)
        elif f == "disable-cnn":
            cfg = replace(cfg, use_cnn=False)
        elif f.startswith("single-column-"):
            k = int(f.rsplit("-", 1)[1]) - 1
            if not 0 <= k < len(cfg.columns):
                raise ValueError(f"{f}: config has {len(cfg.columns)} columns")
            cfg = replace(cfg, columns=(cfg.columns[k],))
            weights = LossWeights((weights.beta[k],), (weights.eta[k],), weights.gamma)
        elif f == "disable-center-loss":
            weights = replace(weights, gamma=0.0)
        elif f == "disable-ds-loss":
            weights = replace(weights, eta=(0.0,) * len(weights.eta))
        elif f == "disable-unsupervised":
            weights = replace(weights, beta=(0.0,) * len(weights.beta), eta=(0.0,) * len(weights.eta))
        else:
            raise ValueError(f"unknown ablation flag {f!r}")
    return cfg, weights


# ---------------------------------------------------------------- cross-validation

def check_fold(fold: Fold, known_subjects: set[str]) -> None:
    leaked = set(fold.train) & set(fold.test)
    if leaked:
        raise SubjectLeakageError(f"fold {fold.index}: subjects {sorted(leaked)} in both train and test")
    unknown = (set(fold.train) | set(fold.test)) - known_subjects
    if unknown:
        raise ValueError(f"fold {fold.index}: subjects {sorted(unknown)} not in dataset")


def run_fold(trials: Sequence[Trial], fold: Fold, fraction: float, model_cfg: ModelConfig, train_cfg: TrainConfig,
             weights: LossWeights, mask_seed: int = 0, checkpoint_dir: str | Path | None = None) -> FoldResult:
    torch.set_num_threads(1)
    check_fold(fold, {t.subject_id for t in trials})
    train_set, test_set = set(fold.train), set(fold.test)
    fit = [t for t in trials if t.subject_id in train_set]
    test = [t for t in trials if t.subject_id in test_set]
    if not fit or not test:
        raise ValueError(f"fold {fold.index}: empty train or test set")
    mask = apply_label_mask([t.trial_id for t in fit], fraction, mask_seed + fold.index, [t.label for t in fit])
    cfg = replace(train_cfg, seed=train_cfg.seed + fold.index)
    model, hist = train(fit, mask, model_cfg, cfg, weights)
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, Path(checkpoint_dir) / f"fold{fold.index}.ckpt",
                        extra={"fold": fold.index, "best_epoch": hist.best_epoch})
    x, y = stack_trials(test, train_cfg.dtype)
    preds = predict(model, x).argmax(1).numpy()
    y = y.numpy()
    K = model_cfg.class_count
    return FoldResult(
        index=fold.index, repetition=fold.repetition, train_subjects=list(fold.train), test_subjects=list(fold.test),
        accuracy=accuracy(preds, y), macro_f1=macro_f1(preds, y, K),
        confusion=confusion(preds, y, K, normalize=True).tolist(), counts=confusion(preds, y, K).tolist(),
        n_train=len(fit), n_labeled=len(mask.labeled_ids), n_unlabeled=len(mask.unlabeled_ids), n_test=len(test),
        best_epoch=hist.best_epoch, val_accuracy=hist.best.val_accuracy,
    )


def run_cv(trials: Sequence[Trial], plan: SplitPlan, fraction: float, model_cfg: ModelConfig,
           train_cfg: TrainConfig, weights: LossWeights, *, mask_seed: int = 0, jobs: int = 1,
           metadata: dict | None = None, checkpoint_dir: str | Path | None = None) -> EvalReport:
    """Train and test once per fold; no test subject's trials reach training or validation.

    Every fold's subject sets are checked before any training starts.
    """
    known = {t.subject_id for t in trials}
    for fold in plan.folds:
        check_fold(fold, known)
    args = [(trials, f, fraction, model_cfg, train_cfg, weights, mask_seed, checkpoint_dir) for f in plan.folds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_fold, *zip(*args)))
    else:
        results = [run_fold(*a) for a in args]
    meta = {"label_fraction": fraction, "split_kind": plan.kind, "split_seed": plan.seed,
            "fold_count": len(plan.folds), **(metadata or {})}
    return EvalReport(results, meta)


def label_fraction_experiment(trials: Sequence[Trial], plan: SplitPlan, fractions: Sequence[float],
                              model_cfg: ModelConfig, train_cfg: TrainConfig, weights: LossWeights,
                              **kwargs) -> tuple[dict[float, EvalReport], list[dict]]:
    """One cross-validation per label fraction; rows hold N, N_l, N_u (fold means) and metric mean/std."""
    reports, rows = {}, []
    for frac in fractions:
        rep = run_cv(trials, plan, frac, model_cfg, train_cfg, weights, **kwargs)
        reports[frac] = rep
        rows.append({
            "fraction": frac,
            "N": float(np.mean([f.n_train for f in rep.folds])),
            "N_l": float(np.mean([f.n_labeled for f in rep.folds])),
            "N_u": float(np.mean([f.n_unlabeled for f in rep.folds])),
            **rep.summary(),
        })
    return reports, rows


def ablate(trials: Sequence[Trial], plan: SplitPlan, variants: Sequence[str], model_cfg: ModelConfig,
           train_cfg: TrainConfig, weights: LossWeights, fraction: float = 1.0,
           **kwargs) -> tuple[dict[str, EvalReport], list[dict]]:
    """Run each variant on identical splits and seeds.

    When ``"full"`` is among the variants every other row carries the exact
    Wilcoxon p-value of the fold-wise accuracy differences against it.
    """
    parsed = {v: parse_variant(v) for v in variants}  # fail fast on unknown flags
    reports = {}
    for name, flags in parsed.items():
        cfg, w = apply_variant(model_cfg, weights, flags)
        reports[name] = run_cv(trials, plan, fraction, cfg, train_cfg, w,
                               metadata={"variant": name, "flags": flags}, **kwargs)
    rows = []
    base = reports.get("full")
    for name, rep in reports.items():
        row = {"variant": name, **rep.summary(), "fold_accuracies": [f.accuracy for f in rep.folds]}
        if base is not None and name != "full":
            diffs = [a.accuracy - b.accuracy for a, b in zip(base.folds, rep.folds)]
            row["p_value_vs_full"] = wilcoxon_exact(diffs) if len(diffs) <= 25 else float("nan")
        rows.append(row)
    return reports, rows


def write_table(rows: Sequence[dict], path: str | Path) -> None:
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (" ".join(map(repr, v)) if isinstance(v, list) else v) for k, v in r.items()})


# ---------------------------------------------------------------- latent export

LATENT_LAYERS = ("final-fc", "concat-latent")


@torch.no_grad()
def export_latents(model: SSDA, trials: Sequence[Trial], layer: str = "final-fc") -> tuple[list[str], list[list]]:
    """Per-trial vectors (classifier logits or concatenated column latents) with ids and labels."""
    if layer not in LATENT_LAYERS:
        raise ValueError(f"layer must be one of {LATENT_LAYERS}")
    dim = model.cfg.class_count if layer == "final-fc" else model.cfg.concat_dim
    header = ["trial_id", "subject_id", "label", *(f"z{i}" for i in range(dim))]
    if not trials:
        return header, []
    model.eval()
    dtype = next(model.parameters()).dtype
    x, _ = stack_trials(trials, dtype)
    out = model(x, decode=False)
    vecs = out.logits if layer == "final-fc" else out.concat
    rows = [[t.trial_id, t.subject_id, "" if t.label is None else t.label, *map(float, v)]
            for t, v in zip(trials, vecs)]
    return header, rows


def write_latents(path: str | Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
