"""``ssda`` command line: ingest, train, eval, ablate, gradcheck, report.

Every command writes only under ``--out``. Exit codes: 0 ok, 1 usage or
config error, 2 data error (or an aborted fold), 3 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import re
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from . import __version__
from .config import make_split_plan, validate_config, apply_label_mask
from .evaluate import (SubjectLeakageError, EvalReport, ablate, export_latents, label_fraction_experiment,
                       parse_variant, run_cv, write_latents, write_table)
from .ingest import FormatError, epoch, load_dataset, parse_synth_spec, read_recording, save_dataset, synth_generate
from .model import save_checkpoint
from .settings import ConfigError, RunConfig, dump_config, load_config
from .train import GRAD_SELECTORS, grad_check, grad_check_passes, miniature_config, train

log = logging.getLogger("ssda")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class VerificationError(Exception):
    pass


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    version: str = __version__
    config_text: str = ""
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: list[str] = field(default_factory=list)
    started: str = ""
    finished: str = ""
    status: str = "running"

    def write(self, out: Path) -> None:
        (out / "manifest.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True))


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which is our data-error code
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _floats(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ssda", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True, data=True):
        sp.add_argument("--out", required=True, type=Path, help="run directory (created)")
        sp.add_argument("--config", type=Path, required=config_required, help="key = value config file or manifest")
        sp.add_argument("--seed", type=int, help="override train, mask and split seeds")
        sp.add_argument("-v", "--verbose", action="store_true")
        if data:
            src = sp.add_mutually_exclusive_group(required=True)
            src.add_argument("--dataset", type=Path, help="dataset container written by `ssda ingest`")
            src.add_argument("--synth", help="synthetic data spec, e.g. subjects=6,trials=30,snr=1")

    sp = sub.add_parser("ingest", help="EDF / array recordings or synthetic spec -> dataset container")
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--config", type=Path, help="supplies event_map, trial_duration_s, onset_offset_ms, class_count")
    sp.add_argument("--synth")
    sp.add_argument("--subject-pattern", default=r"S\d+",
                    help="regex picking the subject id out of each file name (default: S<digits>)")
    sp.add_argument("-v", "--verbose", action="store_true")
    sp.add_argument("inputs", nargs="*", type=Path)

    sp = sub.add_parser("train", help="fit one model on the whole dataset")
    common(sp)
    sp.add_argument("--export-latents", choices=("final-fc", "concat-latent"))

    sp = sub.add_parser("eval", help="subject-independent cross-validation")
    common(sp)
    sp.add_argument("--fractions", type=_floats, help="label fractions, e.g. 0.03,0.10,0.30")
    sp.add_argument("--jobs", type=int, default=1)

    sp = sub.add_parser("ablate", help="cross-validate ablation variants on identical splits")
    common(sp)
    sp.add_argument("--variants", type=_names, help="comma list, e.g. full,disable-attention,single-column-1")
    sp.add_argument("--jobs", type=int, default=1)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every loss term on the miniature config")
    common(sp, config_required=False, data=False)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--eps", type=float, default=1e-6)
    sp.add_argument("--max-entries", type=int, default=64, help="entries checked per tensor (0: all)")

    sp = sub.add_parser("report", help="render the reports found in a run directory as markdown")
    sp.add_argument("--out", required=True, type=Path, help="run directory holding report JSON files")
    sp.add_argument("-v", "--verbose", action="store_true")
    return p


# ---------------------------------------------------------------- shared steps

def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed),
                      split=replace(cfg.split, split_seed=args.seed),
                      eval=replace(cfg.eval, mask_seed=args.seed))
    problems = validate_config(cfg.model)
    if problems:
        raise ConfigError("invalid model config:\n  " + "\n  ".join(problems))
    return cfg


def _load_trials(args, cfg: RunConfig | None, manifest: RunManifest):
    try:
        if getattr(args, "synth", None):
            manifest.inputs["synth"] = args.synth
            trials, _ = synth_generate(parse_synth_spec(args.synth))
        else:
            if not args.dataset.is_file():
                raise DataError(f"{args.dataset}: no such file")
            manifest.inputs[str(args.dataset)] = sha256(args.dataset)
            trials, _ = load_dataset(args.dataset)
    except ValueError as exc:  # FormatError included
        raise DataError(str(exc)) from None
    if not trials:
        raise DataError("dataset holds no trials")
    if cfg is not None:
        C, T = trials[0].data.shape
        m = cfg.model
        if C != m.channel_count:
            raise DataError(f"dataset has {C} channels, config expects {m.channel_count}")
        if T < m.window_len:
            raise DataError(f"trials have {T} samples, shorter than window_len {m.window_len}")
        bad = {t.label for t in trials if t.label is not None and t.label >= m.class_count}
        if bad:
            raise DataError(f"labels {sorted(bad)} exceed class_count {m.class_count}")
    return trials


def _split_plan(cfg: RunConfig, trials):
    s = cfg.split
    subjects = sorted({t.subject_id for t in trials} - set(s.exclude_subjects))
    folds = s.folds if s.folds else (len(subjects) if s.split_kind == "loso" else 0)
    try:
        return make_split_plan(subjects, s.split_kind, folds, s.split_seed, test_size=s.test_size or None,
                               repetitions=s.repetitions, disjoint=s.disjoint_repetitions)
    except ValueError as exc:
        raise ConfigError(f"split: {exc}") from None


def _seeds(cfg: RunConfig) -> dict:
    return {"train": cfg.train.seed, "mask": cfg.eval.mask_seed, "split": cfg.split.split_seed}


# ---------------------------------------------------------------- commands

def cmd_ingest(args, out: Path, manifest: RunManifest) -> None:
    if args.synth:
        if args.inputs:
            raise UsageError("give either --synth or input files, not both")
        spec = parse_synth_spec(args.synth)
        trials, truth = synth_generate(spec)
        manifest.inputs["synth"] = args.synth
        save_dataset(trials, out / "dataset.ssda", meta={"synth": args.synth})
        print(f"wrote {len(trials)} synthetic trials to {out / 'dataset.ssda'}")
        return
    if not args.inputs:
        raise UsageError("no input files (or --synth) given")
    if args.config is None:
        raise UsageError("--config is required to epoch recordings")
    cfg = load_config(args.config)
    manifest.config_text = dump_config(cfg)
    if not cfg.data.event_map or cfg.data.trial_duration_s <= 0:
        raise ConfigError("event_map and trial_duration_s must be set to epoch recordings")
    for path in args.inputs:
        if not path.is_file():
            raise DataError(f"{path}: no such file")
        manifest.inputs[str(path)] = sha256(path)
    pattern = re.compile(args.subject_pattern)
    events = dict(cfg.data.event_map)
    trials = []
    for path in args.inputs:
        try:
            rec = read_recording(path)
        except FormatError as exc:
            raise DataError(str(exc)) from None
        hit = pattern.search(path.name)
        subject = hit.group(0) if hit else path.stem
        got = epoch(rec, events, cfg.data.trial_duration_s, subject_id=subject, session=path.stem,
                    class_count=cfg.model.class_count, onset_offset_s=cfg.data.onset_offset_ms / 1000)
        log.info("%s: %d trials (subject %s)", path, len(got), subject)
        trials.extend(got)
    if not trials:
        raise DataError("no annotation matched the event map")
    try:
        save_dataset(trials, out / "dataset.ssda", meta={"sources": sorted(manifest.inputs)})
    except ValueError as exc:
        raise DataError(str(exc)) from None
    print(f"wrote {len(trials)} trials from {len(args.inputs)} file(s) to {out / 'dataset.ssda'}")


def cmd_train(args, out: Path, manifest: RunManifest) -> None:
    cfg = _resolve_config(args)
    manifest.config_text, manifest.seeds = dump_config(cfg), _seeds(cfg)
    manifest.write(out)
    trials = _load_trials(args, cfg, manifest)
    manifest.write(out)
    mask = apply_label_mask([t.trial_id for t in trials], cfg.eval.label_fraction, cfg.eval.mask_seed,
                            [t.label for t in trials])
    model, hist = train(trials, mask, cfg.model, cfg.train, cfg.weights, log_path=out / "history.csv")
    save_checkpoint(model, out / "model.ckpt", extra={"best_epoch": hist.best_epoch})
    if args.export_latents:
        write_latents(out / "latents.csv", *export_latents(model, trials, args.export_latents))
    best = hist.best
    print(f"best epoch {hist.best_epoch}: val_acc={best.val_accuracy:.4f} val_ce={best.val_ce:.4f}")


def cmd_eval(args, out: Path, manifest: RunManifest) -> None:
    cfg = _resolve_config(args)
    manifest.config_text, manifest.seeds = dump_config(cfg), _seeds(cfg)
    manifest.write(out)
    trials = _load_trials(args, cfg, manifest)
    manifest.write(out)
    plan = _split_plan(cfg, trials)
    (out / "splits.tsv").write_text(plan.to_manifest())
    kw = dict(mask_seed=cfg.eval.mask_seed, jobs=args.jobs)
    if args.fractions:
        reports, rows = label_fraction_experiment(trials, plan, args.fractions, cfg.model, cfg.train, cfg.weights,
                                                  **kw)
        for frac, rep in reports.items():
            rep.write(out, stem=f"report_f{frac:g}")
        write_table(rows, out / "fractions.csv")
        for r in rows:
            print(f"N_l/N={r['fraction']:g}: acc {r['accuracy_mean']:.4f} +/- {r['accuracy_std']:.4f}")
        return
    rep = run_cv(trials, plan, cfg.eval.label_fraction, cfg.model, cfg.train, cfg.weights,
                 checkpoint_dir=out / "checkpoints", **kw)
    rep.write(out)
    print(f"accuracy {rep.accuracy_mean:.4f} +/- {rep.accuracy_std:.4f}, macro F1 {rep.f1_mean:.4f}")


def cmd_ablate(args, out: Path, manifest: RunManifest) -> None:
    cfg = _resolve_config(args)
    variants = args.variants or cfg.eval.variants
    try:
        for v in variants:
            parse_variant(v)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    manifest.config_text, manifest.seeds = dump_config(cfg), _seeds(cfg)
    manifest.write(out)
    trials = _load_trials(args, cfg, manifest)
    manifest.write(out)
    plan = _split_plan(cfg, trials)
    (out / "splits.tsv").write_text(plan.to_manifest())
    reports, rows = ablate(trials, plan, variants, cfg.model, cfg.train, cfg.weights, cfg.eval.label_fraction,
                           mask_seed=cfg.eval.mask_seed, jobs=args.jobs)
    for name, rep in reports.items():
        rep.write(out, stem=f"report_{name}")
    write_table(rows, out / "ablation.csv")
    for r in rows:
        p = r.get("p_value_vs_full")
        print(f"{r['variant']:<28} acc {r['accuracy_mean']:.4f}" + ("" if p is None else f"  p={p:.4g}"))


def cmd_gradcheck(args, out: Path, manifest: RunManifest) -> None:
    model_cfg = miniature_config()
    seed = 0
    if args.config is not None:
        cfg = _resolve_config(args)
        manifest.config_text = dump_config(cfg)
        seed = cfg.train.seed
    elif args.seed is not None:
        seed = args.seed
    manifest.seeds = {"gradcheck": seed}
    manifest.write(out)
    if args.eps <= 0:
        raise ConfigError("degenerate step: --eps must be > 0")
    results, failed = {}, []
    for sel in GRAD_SELECTORS:
        rep = grad_check(model_cfg, sel, eps=args.eps, seed=seed, max_entries=args.max_entries or None)
        worst = max(rep.values())
        results[sel] = {"max_relative_error": worst, "per_tensor": rep}
        ok = grad_check_passes(rep, args.tolerance)
        print(f"{sel:<8} max rel err {worst:.3e}  {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(sel)
    (out / "gradcheck.json").write_text(json.dumps({"tolerance": args.tolerance, "eps": args.eps,
                                                    "results": results}, indent=2, sort_keys=True))
    if failed:
        raise VerificationError(f"gradient check failed for {', '.join(failed)}")


def _render(name: str, rep: EvalReport) -> list[str]:
    lines = [f"## {name}", ""]
    meta = ", ".join(f"{k}={v}" for k, v in sorted(rep.metadata.items()))
    if meta:
        lines += [meta, ""]
    lines += ["| fold | rep | test subjects | accuracy | macro F1 |", "|---|---|---|---|---|"]
    for f in rep.folds:
        lines.append(f"| {f.index} | {f.repetition} | {' '.join(f.test_subjects)} | {f.accuracy:.4f} | "
                     f"{f.macro_f1:.4f} |")
    lines += ["", f"accuracy {rep.accuracy_mean:.4f} +/- {rep.accuracy_std:.4f}; "
                  f"macro F1 {rep.f1_mean:.4f} +/- {rep.f1_std:.4f}", ""]
    K = len(rep.folds[0].counts) if rep.folds else 0
    if K:
        total = [[sum(f.counts[i][j] for f in rep.folds) for j in range(K)] for i in range(K)]
        lines += ["pooled confusion (rows: true class)", "", "| true \\ pred | " + " | ".join(map(str, range(K))) + " |",
                  "|---" * (K + 1) + "|"]
        lines += [f"| {i} | " + " | ".join(map(str, row)) + " |" for i, row in enumerate(total)]
        lines.append("")
    return lines


def cmd_report(args, out: Path, manifest: RunManifest) -> None:
    found = []
    for path in sorted(out.glob("*.json")):
        if path.name in ("manifest.json", "gradcheck.json"):
            continue
        try:
            found.append((path.stem, EvalReport.from_json(path.read_text())))
        except (KeyError, TypeError, ValueError):
            log.warning("%s: not an evaluation report, skipped", path)
    if not found:
        raise DataError(f"{out}: no report JSON files found")
    lines = ["# Evaluation summary", ""]
    for name, rep in found:
        lines += _render(name, rep)
    (out / "summary.md").write_text("\n".join(lines))
    print("\n".join(lines))


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"ssda: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out: Path = args.out
    if args.command == "report" and not out.is_dir():
        print(f"ssda: error: {out}: no such run directory", file=sys.stderr)
        return EXIT_DATA
    out.mkdir(parents=True, exist_ok=True)
    if getattr(args, "jobs", 1) == 1:
        torch.set_num_threads(1)  # bit-reproducible reductions

    handler = logging.FileHandler(out / f"{args.command}.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    manifest = RunManifest(args.command, argv, started=_now())
    if args.command != "report":
        manifest.write(out)

    code, status = EXIT_OK, "ok"
    try:
        COMMANDS[args.command](args, out, manifest)
    except (UsageError, ConfigError) as exc:
        code, status = EXIT_CONFIG, f"config error: {exc}"
    except (DataError, FormatError, FileNotFoundError) as exc:
        code, status = EXIT_DATA, f"data error: {exc}"
    except (VerificationError, SubjectLeakageError) as exc:
        code, status = EXIT_VERIFY, f"verification failure: {exc}"
    except Exception as exc:  # an aborted fold or other runtime failure
        log.exception("run aborted")
        code, status = EXIT_DATA, f"run aborted: {type(exc).__name__}: {exc}"
    finally:
        log.removeHandler(handler)
        handler.close()
    if code:
        print(f"ssda: {status}", file=sys.stderr)
    if args.command != "report":
        manifest.status = status
        manifest.finished = _now()
        manifest.outputs = sorted(str(p.relative_to(out)) for p in out.rglob("*")
                                  if p.is_file() and p.name != "manifest.json")
        manifest.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
