"""Cross-validate on class-independent noise; mean accuracy should sit near 1/K."""

import argparse
from dataclasses import replace

import torch

from ssda.config import make_split_plan
from ssda.evaluate import run_cv
from ssda.ingest import SynthSpec, synth_generate
from ssda.settings import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/desk.cfg")
    ap.add_argument("--classes", type=int, nargs="+", default=[2, 4])
    ap.add_argument("--subjects", type=int, default=4)
    ap.add_argument("--trials", type=int, default=80)
    ap.add_argument("--epochs", type=int, default=15)
    args = ap.parse_args()
    torch.set_num_threads(1)

    cfg = load_config(args.config)
    for K in args.classes:
        trials, _ = synth_generate(SynthSpec(subject_count=args.subjects, trials_per_subject=args.trials,
                                             C=cfg.model.channel_count, K=K, class_signal_snr=0.0, seed=90 + K))
        plan = make_split_plan(sorted({t.subject_id for t in trials}), "loso", args.subjects, 0)
        rep = run_cv(trials, plan, 1.0, replace(cfg.model, class_count=K), replace(cfg.train, epochs=args.epochs),
                     cfg.weights)
        print(f"K={K}: mean accuracy {rep.accuracy_mean:.4f} +/- {rep.accuracy_std:.4f} (chance {1 / K:.3f})")


if __name__ == "__main__":
    main()
