"""Train on a small, fully labeled, separable set and report training accuracy per epoch."""

import argparse
from dataclasses import replace

import torch

from ssda.config import apply_label_mask
from ssda.ingest import SynthSpec, synth_generate
from ssda.settings import load_config
from ssda.train import train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/desk.cfg")
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--trials", type=int, default=20, help="per subject, two subjects")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)

    cfg = load_config(args.config)
    trials, _ = synth_generate(SynthSpec(subject_count=2, trials_per_subject=args.trials,
                                         C=cfg.model.channel_count, K=cfg.model.class_count, seed=args.seed))
    mask = apply_label_mask([t.trial_id for t in trials], 1.0, args.seed)
    tc = replace(cfg.train, epochs=args.epochs, seed=args.seed, track_train_accuracy=True)
    _, hist = train(trials, mask, cfg.model, tc, cfg.weights)
    for rec in hist.epochs:
        print(f"epoch {rec.epoch:4d}  loss {rec.losses['total']:.4f}  train acc {rec.train_accuracy:.3f}")
    hit = next((r.epoch for r in hist.epochs if r.train_accuracy >= 0.95), None)
    print(f"first epoch with train accuracy >= 0.95: {hit}")


if __name__ == "__main__":
    main()
