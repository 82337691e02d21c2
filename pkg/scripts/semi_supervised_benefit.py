"""Paired comparison: full model vs the same model with the unsupervised terms switched off.

Each seed draws a fresh synthetic dataset, split and label mask; both variants
see identical data. Prints one line per seed and the win count (ties count
as wins for the full model) plus the exact Wilcoxon p-value.
"""

import argparse
from dataclasses import replace

import torch

from ssda.config import make_split_plan
from ssda.evaluate import apply_variant, run_cv
from ssda.ingest import SynthSpec, synth_generate
from ssda.metrics import wilcoxon_exact
from ssda.settings import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.cfg")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--snr", type=float, default=1.0)
    ap.add_argument("--fraction", type=float, default=0.25)
    ap.add_argument("--subjects", type=int, default=6)
    ap.add_argument("--trials", type=int, default=30)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--mse-reduction", choices=("sum", "mean"))
    args = ap.parse_args()
    torch.set_num_threads(1)

    cfg = load_config(args.config)
    tc = cfg.train
    if args.epochs:
        tc = replace(tc, epochs=args.epochs)
    if args.mse_reduction:
        tc = replace(tc, mse_reduction=args.mse_reduction)
    _, sup_weights = apply_variant(cfg.model, cfg.weights, ["disable-unsupervised"])

    diffs, wins = [], 0
    for seed in range(args.seeds):
        trials, _ = synth_generate(SynthSpec(subject_count=args.subjects, trials_per_subject=args.trials,
                                             C=cfg.model.channel_count, K=cfg.model.class_count,
                                             class_signal_snr=args.snr, seed=seed))
        plan = make_split_plan(sorted({t.subject_id for t in trials}), "kfold", 1, seed, test_size=2)
        run = replace(tc, seed=seed)
        full = run_cv(trials, plan, args.fraction, cfg.model, run, cfg.weights, mask_seed=seed).accuracy_mean
        base = run_cv(trials, plan, args.fraction, cfg.model, run, sup_weights, mask_seed=seed).accuracy_mean
        wins += full >= base
        diffs.append(full - base)
        print(f"seed {seed}: full {full:.4f}  supervised-only {base:.4f}", flush=True)
    print(f"full >= supervised-only in {wins}/{args.seeds} seeds; Wilcoxon p = {wilcoxon_exact(diffs):.4f}")


if __name__ == "__main__":
    main()
