"""Acceptance gate: one test per criterion, each recorded as a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary lists every
criterion with the measured values.
"""

import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import record
from ssda.config import (PUBLISHED_COLUMNS, apply_label_mask, bci2a_config, make_split_plan,
                         physionet_config)
from ssda.evaluate import apply_variant, run_cv
from ssda.ingest import FormatError, Recording, SynthSpec, read_array_file, read_edf, synth_generate, write_array_file
from ssda.losses import center_loss, cross_entropy, stress
from ssda.metrics import wilcoxon_exact
from ssda.model import attention_pool, init_params
from ssda.settings import load_config
from ssda.train import grad_check, train
from ssda.windowing import slice_batch, window_count

ROOT = Path(__file__).resolve().parents[1]
DESK = load_config(ROOT / "configs" / "desk.cfg")


# ---------------------------------------------------------------- 1. shapes

def _width_oracle(C, m, col):
    conv = m - col.kernel + 1          # valid conv over C x k leaves 1 x (m - k + 1)
    return col.filters * (conv // col.pool)


def test_criterion_01_shape_conformance():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    bad = []
    assert _width_oracle(64, 400, PUBLISHED_COLUMNS[0]) == 256 and _width_oracle(64, 400, PUBLISHED_COLUMNS[2]) == 330
    for cfg in (physionet_config(), bci2a_config()):
        model = init_params(cfg, 0).eval()
        C, m = cfg.channel_count, cfg.window_len
        for T in rng.integers(m, 3 * m, size=50):
            x = torch.randn(1, C, int(T))
            n = window_count(int(T), m, cfg.step)
            with torch.no_grad():
                windows = slice_batch(x, m, cfg.step)
                for col, spec in zip(model.columns, cfg.columns):
                    q = col.window_features(windows)
                    if q.shape != (1, n, _width_oracle(C, m, spec)):
                        bad.append((C, int(T), tuple(q.shape)))
                out = model(x)
            if any(r.shape != (1, n, C, m) for r in out.recon) or out.windows.shape != (1, n, C, m):
                bad.append((C, int(T), "decoder"))
    secs = time.perf_counter() - t0
    ok = not bad and secs < 60
    record(1, ok, f"2 configs x 50 T values, encoder/decoder shape mismatches={len(bad)}, {secs:.1f}s (< 60s)")
    assert ok, bad


# ---------------------------------------------------------------- 2. windowing

def test_criterion_02_windowing():
    rng = np.random.default_rng(1)
    mism = 0
    for _ in range(200):
        T = int(rng.integers(1, 3000))
        m = int(rng.integers(1, T + 1))
        p = int(rng.integers(1, 400))
        starts = len(range(0, T - m + 1, p))
        mism += window_count(T, m, p) != starts
    a, b = window_count(496, 400, 20), window_count(1000, 400, 50)
    ok = a == 5 and b == 13 and mism == 0
    record(2, ok, f"n(496,400,20)={a}, n(1000,400,50)={b}, oracle mismatches={mism}/200")
    assert ok


# ---------------------------------------------------------------- 3. gradient checks

def test_criterion_03_gradient_checks():
    t0 = time.perf_counter()
    worst = {}
    for sel in ("ce", "center", "mse", "ds", "total"):
        worst[sel] = max(grad_check(selector=sel, max_entries=None).values())
    secs = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and secs < 300
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    record(3, ok, f"max rel err (float64, every parameter entry): {detail}; {secs:.0f}s (< 300s)")
    assert ok


# ---------------------------------------------------------------- 4. loss closed forms

def test_criterion_04_loss_closed_forms():
    D = torch.float64
    y = torch.tensor([0, 1, 1, 0])
    ce2 = float(cross_entropy(torch.full((4, 2), 0.5, dtype=D), y))
    ce4 = float(cross_entropy(torch.full((4, 4), 0.25, dtype=D), y))
    c0 = torch.zeros(2, 2, dtype=D)
    cl_a = float(center_loss(torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=D), torch.tensor([0, 0]), c0))
    cl_b = float(center_loss(torch.tensor([[2.0, 0.0]], dtype=D), torch.tensor([0]), c0))
    ds = float(stress(torch.tensor([[0.0], [2.0]], dtype=D), torch.tensor([[0.0], [1.0]], dtype=D), normalize=False))
    errs = [abs(ce2 - math.log(2)), abs(ce4 - math.log(4)), abs(cl_a - 1.0), abs(cl_b - 2.0), abs(ds - 2.0)]
    ok = max(errs) <= 1e-9
    record(4, ok, f"CE={ce2:.12f}/{ce4:.12f}, center=1:{cl_a}, 2:{cl_b}, DS=2:{ds}; max err {max(errs):.1e}")
    assert ok


# ---------------------------------------------------------------- 5. attention

def test_criterion_05_attention():
    g = torch.Generator().manual_seed(5)
    worst = 0.0
    for i in range(1000):
        n, d = int(torch.randint(1, 30, (1,), generator=g)), int(torch.randint(1, 70, (1,), generator=g))
        scale = float(10 ** torch.empty(1).uniform_(-3, 3, generator=g))
        h = torch.randn(n, d, generator=g) * scale
        alpha, _ = attention_pool(h, torch.randn(1, d, generator=g), torch.randn(1, generator=g))
        worst = max(worst, abs(float(alpha.sum()) - 1.0))
    exact = True
    for n in range(1, 40):
        alpha, _ = attention_pool(torch.full((n, 8), 1.7), torch.randn(1, 8, generator=g), torch.randn(1, generator=g))
        exact &= bool(torch.all(alpha == 1.0 / n))
    ok = worst <= 1e-6 and exact
    record(5, ok, f"max |sum(alpha)-1| over 1000 inputs = {worst:.1e}; constant input exact 1/n: {exact}")
    assert ok


# ---------------------------------------------------------------- 6. Wilcoxon

def _enumerate_p(d):
    d = [x for x in d if x != 0]
    n = len(d)
    a = np.abs(d)
    ranks = np.array([np.mean([1 + j for j, v in enumerate(sorted(a)) if v == x]) for x in a])
    obs = ranks[np.array(d) > 0].sum()
    ws = [sum(r for r, bit in zip(ranks, range(n)) if mask >> bit & 1) for mask in range(2 ** n)]
    lo = sum(w <= obs + 1e-9 for w in ws)
    hi = sum(w >= obs - 1e-9 for w in ws)
    return min(1.0, 2 * min(lo, hi) / 2 ** n)


def test_criterion_06_wilcoxon():
    p10 = wilcoxon_exact(np.linspace(0.01, 0.1, 10))
    p9 = wilcoxon_exact(np.linspace(0.01, 0.09, 9))
    rng = np.random.default_rng(6)
    mism = 0
    for _ in range(200):
        n = int(rng.integers(1, 11))
        d = rng.integers(-3, 4, n) / 4.0   # coarse values force ties and zeros
        if not np.any(d):
            continue
        mism += not math.isclose(wilcoxon_exact(d), _enumerate_p(d), abs_tol=1e-12)
    ok = p10 == 2 / 1024 and p9 == 2 / 512 and round(p10, 3) == 0.002 and round(p9, 3) == 0.004 and mism == 0
    record(6, ok, f"p(10 positive)={p10:.6f}, p(9 positive)={p9:.6f}, enumeration mismatches={mism}/200")
    assert ok


# ---------------------------------------------------------------- 7. overfit capacity

def test_criterion_07_overfit_capacity():
    t0 = time.perf_counter()
    trials, _ = synth_generate(SynthSpec(subject_count=2, trials_per_subject=20, C=8, T=128, K=2, seed=0))
    mask = apply_label_mask([t.trial_id for t in trials], 1.0, 0)
    tc = replace(DESK.train, epochs=300, track_train_accuracy=True)
    _, hist = train(trials, mask, DESK.model, tc, DESK.weights)
    accs = [r.train_accuracy for r in hist.epochs]
    first = next((i for i, a in enumerate(accs) if a >= 0.95), None)
    secs = time.perf_counter() - t0
    ok = first is not None and secs < 600
    record(7, ok, f"40 separable trials, 100% labeled: max train acc {max(accs):.3f}, "
                  f">=0.95 first at epoch {first}; {secs:.0f}s (< 600s)")
    assert ok


# ---------------------------------------------------------------- 8. semi-supervised benefit

SEMI_SNR = 1.0


def _paired_run(seed):
    trials, _ = synth_generate(SynthSpec(subject_count=6, trials_per_subject=30, C=8, T=128, K=2,
                                         class_signal_snr=SEMI_SNR, seed=seed))
    plan = make_split_plan(sorted({t.subject_id for t in trials}), "kfold", 1, seed, test_size=2)
    tc = replace(DESK.train, seed=seed)
    ssda = run_cv(trials, plan, 0.25, DESK.model, tc, DESK.weights, mask_seed=seed).accuracy_mean
    _, sup_w = apply_variant(DESK.model, DESK.weights, ["disable-unsupervised"])
    base = run_cv(trials, plan, 0.25, DESK.model, tc, sup_w, mask_seed=seed).accuracy_mean
    return ssda, base


def test_criterion_08_semi_supervised_benefit():
    t0 = time.perf_counter()
    pairs = [_paired_run(seed) for seed in range(10)]
    wins = sum(a >= b for a, b in pairs)
    secs = time.perf_counter() - t0
    ok = wins >= 8 and secs < 3600
    listing = " ".join(f"{a:.3f}/{b:.3f}" for a, b in pairs)
    record(8, ok, f"SSDA >= supervised-only in {wins}/10 seeds (need 8) at 25% labels, snr={SEMI_SNR}; "
                  f"ssda/base: {listing}; {secs:.0f}s")
    assert ok


# ---------------------------------------------------------------- 9. chance level

@pytest.mark.parametrize("K", [2, 4])
def test_criterion_09_chance_level(K):
    trials, _ = synth_generate(SynthSpec(subject_count=4, trials_per_subject=80, C=8, T=128, K=K,
                                         class_signal_snr=0.0, seed=90 + K))
    plan = make_split_plan(sorted({t.subject_id for t in trials}), "loso", 4, seed=0)
    tc = replace(DESK.train, epochs=15)
    rep = run_cv(trials, plan, 1.0, replace(DESK.model, class_count=K), tc, DESK.weights)
    acc = rep.accuracy_mean
    ok = abs(acc - 1 / K) <= 0.08
    prev = ACC9.get("detail", "")
    ACC9[K] = ok
    ACC9["detail"] = (prev + "; " if prev else "") + f"K={K}: mean acc {acc:.3f} (chance {1 / K:.2f} +/- 0.08)"
    record(9, all(v for k, v in ACC9.items() if k != "detail"), ACC9["detail"])
    assert ok


ACC9: dict = {}


# ---------------------------------------------------------------- 10. parsers

def test_criterion_10_parsers(tmp_path):
    from test_ingest import HEX_ORACLE, FIXTURES
    from edf_writer import reference_fixture

    raw = (FIXTURES / "reference.edf").read_bytes()
    hex_ok = raw == reference_fixture() and all(
        raw[o:o + len(bytes.fromhex(h))] == bytes.fromhex(h) for o, h in HEX_ORACLE)
    rec = read_edf(FIXTURES / "reference.edf")
    c3 = [-1 + (d + 32768) * 2 / 65535 for d in (0, 1, -1, 32767, -32768, 2, 3, 4)]
    edf_ok = rec.channel_labels == ("C3", "C4") and rec.fs == 4.0 and np.allclose(rec.signals[0], c3, atol=1e-12, rtol=0)

    src = Recording(tuple(f"c{i}" for i in range(22)), 250.0,
                    np.random.default_rng(10).standard_normal((22, 1000)).astype(np.float32),
                    ((0.5, "769"), (1.5, "770"), (3.0, "771")))
    write_array_file(src, tmp_path / "r.eega")
    back = read_array_file(tmp_path / "r.eega")
    array_ok = (back.signals.tobytes() == src.signals.tobytes() and back.annotations == src.annotations
                and back.channel_labels == src.channel_labels and back.fs == src.fs)

    errors = []
    cases = {
        "truncated header": raw[:100],
        "non-numeric header field": raw[:244] + b"abc     " + raw[252:],
        "record-size mismatch": raw[:-1],
        "unsupported sample width": b"\xff" + raw[1:],
    }
    for msg, data in cases.items():
        p = tmp_path / "bad.edf"
        p.write_bytes(data)
        try:
            read_edf(p)
            errors.append(f"{msg}: no error")
        except FormatError as exc:
            if msg not in str(exc):
                errors.append(f"{msg}: got {exc}")
    for data, msg in ((b"XXXX" + bytes(40), "bad magic"), ((tmp_path / "r.eega").read_bytes()[:-3], "size mismatch")):
        (tmp_path / "bad.eega").write_bytes(data)
        try:
            read_array_file(tmp_path / "bad.eega")
            errors.append(f"{msg}: no error")
        except FormatError as exc:
            if msg not in str(exc):
                errors.append(f"{msg}: got {exc}")
    ok = hex_ok and edf_ok and array_ok and not errors
    record(10, ok, f"hex oracle {hex_ok}, EDF values {edf_ok}, array round trip {array_ok}, "
                   f"malformed-file errors {6 - len(errors)}/6")
    assert ok, errors


# ---------------------------------------------------------------- 11. determinism

def test_criterion_11_determinism(tmp_path):
    from ssda.cli import main

    cfg = tmp_path / "det.cfg"
    cfg.write_text((ROOT / "configs" / "desk.cfg").read_text().replace("epochs = 60", "epochs = 3"))
    args = ["--synth", "subjects=4,trials=10,snr=1"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["eval", "--config", str(cfg), "--out", str(a), *args]) == 0
    # second run driven by the first run's manifest only
    assert main(["eval", "--config", str(a / "manifest.json"), "--out", str(b), *args]) == 0
    names = sorted(str(p.relative_to(a)) for p in a.rglob("*")
                   if p.suffix in (".json", ".csv", ".ckpt", ".tsv") and p.name != "manifest.json")
    differ = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    ckpts = [n for n in names if n.endswith(".ckpt")]
    ok = not differ and len(ckpts) == 3 and "report.json" in names
    record(11, ok, f"{len(names)} artifacts compared ({len(ckpts)} checkpoints), differing: {differ or 'none'}")
    assert ok
