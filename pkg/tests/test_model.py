import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ssda.config import PUBLISHED_COLUMNS, bci2a_config, desk_config, physionet_config
from ssda.model import (CheckpointError, SSDA, attention_pool, init_params, load_checkpoint, parameter_count,
                        save_checkpoint)


def _param_oracle(cfg):
    """Count parameters from layer arithmetic alone."""
    C, m, total = cfg.channel_count, cfg.window_len, 0
    for c in cfg.columns:
        width = c.filters * ((m - c.kernel + 1) // c.pool)
        total += c.filters * C * c.kernel + c.filters + 2 * c.filters        # conv + BN
        total += 4 * c.lstm_units * (width + c.lstm_units) + 8 * c.lstm_units  # LSTM, two bias vectors
        total += c.lstm_units + 1                                            # attention
        u = c.dec_lstm_units
        total += 4 * u * (c.lstm_units + u) + 8 * u
        total += 2 + c.dec_filters * 49 + c.dec_filters + 2 * c.dec_filters + c.dec_filters + 1
    d = sum(c.lstm_units for c in cfg.columns)
    return total + d * cfg.fc_hidden + cfg.fc_hidden + cfg.fc_hidden * cfg.class_count + cfg.class_count


@pytest.mark.parametrize("make", [physionet_config, bci2a_config, desk_config])
def test_parameter_count_matches_oracle(make):
    cfg = make()
    assert parameter_count(SSDA(cfg)) == _param_oracle(cfg)


def test_physionet_parameter_count_frozen():
    assert parameter_count(SSDA(physionet_config())) == 619140


def test_forward_shapes_physionet():
    cfg = physionet_config()
    model = init_params(cfg, 0).eval()
    out = model(torch.randn(2, 64, 496))
    assert out.windows.shape == (2, 5, 64, 400)
    assert [h.shape for h in out.h_enc] == [(2, 5, 64), (2, 5, 40), (2, 5, 30)]
    assert out.concat.shape == (2, 134)
    assert all(r.shape == (2, 5, 64, 400) for r in out.recon)
    assert out.features.shape == (2, 128) and out.probs.shape == (2, 2)


def test_encoder_widths():
    cfg = physionet_config()
    col = SSDA(cfg).columns[0]
    q = col.window_features(torch.randn(1, 1, 64, 400))
    assert q.shape[-1] == 256
    q3 = SSDA(cfg).columns[2].window_features(torch.randn(1, 1, 64, 400))
    assert q3.shape[-1] == 330


def test_decoder_upsample_grid():
    # col 1 with U=4: 2x50 -> 8x200; col 3 with U=2: 2x15 -> 4x60
    c1, c3 = PUBLISHED_COLUMNS[0], PUBLISHED_COLUMNS[2]
    assert (c1.reshape_rows * 4, c1.reshape_cols * 4) == (8, 200)
    assert (c3.reshape_rows * 2, c3.reshape_cols * 4) == (4, 60)
    seen = {}
    model = init_params(bci2a_config(), 0).eval()
    hook = model.columns[2].dec_bn1.register_forward_hook(lambda m, i, o: seen.update(shape=o.shape))
    model(torch.randn(1, 22, 400))
    hook.remove()
    assert tuple(seen["shape"][-2:]) == (4, 60)


def test_single_window_single_reconstruction():
    cfg = desk_config()
    out = init_params(cfg, 0).eval()(torch.randn(3, 8, 64))
    assert out.windows.shape[1] == 1 and all(r.shape[1] == 1 for r in out.recon)


def test_rejects_wrong_channel_count():
    with pytest.raises(ValueError):
        init_params(desk_config(), 0)(torch.randn(1, 7, 64))


def test_invalid_config_refused():
    bad = replace(desk_config(), columns=(replace(desk_config().columns[0], reshape_cols=5),))
    with pytest.raises(ValueError, match="reshape"):
        SSDA(bad)


# ---------------------------------------------------------------- attention

def test_attention_closed_form():
    h = torch.tensor([[0.0], [math.log(3.0)]], dtype=torch.float64)
    alpha, v = attention_pool(h, torch.ones(1, 1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
    assert torch.allclose(alpha, torch.tensor([0.25, 0.75], dtype=torch.float64), atol=1e-15)
    assert float(v) == pytest.approx(0.75 * math.log(3.0), abs=1e-15)


def test_attention_constant_input_is_uniform():
    for n in (1, 2, 3, 5, 7, 13):
        h = torch.full((n, 4), 0.37)
        alpha, v = attention_pool(h, torch.randn(1, 4), torch.randn(1))
        assert torch.equal(alpha, torch.full((n,), 1.0 / n))
    alpha, v = attention_pool(torch.tensor([[2.0, -1.0]]), torch.randn(1, 2), torch.zeros(1))
    assert alpha.tolist() == [1.0] and v.tolist() == [2.0, -1.0]


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 20), d=st.integers(1, 16), scale=st.floats(1e-3, 1e3), seed=st.integers(0, 10_000))
def test_attention_sums_to_one(n, d, scale, seed):
    g = torch.Generator().manual_seed(seed)
    h = torch.randn(3, n, d, generator=g) * scale
    alpha, v = attention_pool(h, torch.randn(1, d, generator=g), torch.randn(1, generator=g))
    assert torch.allclose(alpha.sum(-1), torch.ones(3), atol=1e-6)
    assert bool(torch.isfinite(v).all())


# ---------------------------------------------------------------- classifier & modes

def test_zero_classifier_gives_uniform_probs():
    for K in (2, 4):
        model = init_params(desk_config(class_count=K), 0).eval()
        with torch.no_grad():
            for p in model.classifier.parameters():
                p.zero_()
        out = model(torch.randn(2, 8, 80))
        assert torch.allclose(out.probs, torch.full((2, K), 1.0 / K))


def test_softmax_closed_form():
    model = init_params(desk_config(), 0).eval()
    fc2 = model.classifier.fc2
    with torch.no_grad():
        fc2.weight.zero_()
        fc2.bias.copy_(torch.tensor([math.log(9.0), 0.0]))
    out = model(torch.randn(1, 8, 64))
    assert torch.allclose(out.probs, torch.tensor([[0.9, 0.1]]), atol=1e-6)


def test_all_zero_input_gives_zero_encoding():
    model = init_params(desk_config(), 0).eval()
    out = model(torch.zeros(2, 8, 96), decode=False)
    for h, v in zip(out.h_enc, out.latents):
        assert torch.count_nonzero(h) == 0 and torch.count_nonzero(v) == 0
    assert out.recon == []


def test_eval_mode_is_deterministic():
    model = init_params(desk_config(), 1).eval()
    x = torch.randn(4, 8, 100)
    a, b = model(x), model(x)
    assert torch.equal(a.probs, b.probs) and torch.equal(a.recon[0], b.recon[0])


def test_train_mode_without_dropout_matches_eval_forward_math():
    cfg = desk_config()
    cols = tuple(replace(c, dropout=0.0, lstm_dropout=0.0, dec_lstm_dropout=0.0) for c in cfg.columns)
    cfg = replace(cfg, columns=cols)
    model = init_params(cfg, 2, torch.float64)
    x = torch.randn(5, 8, 100, dtype=torch.float64)
    model.train()
    # BN is the only train/eval difference left; load the batch statistics as running ones
    for mod in model.modules():
        if isinstance(mod, torch.nn.BatchNorm2d):
            mod.momentum = None  # cumulative average
            mod.reset_running_stats()
    out_train = model(x)
    model.eval()
    out_eval = model(x)
    assert torch.allclose(out_train.latents[0], out_eval.latents[0], rtol=1e-3, atol=1e-3)


def test_ablation_switches_change_structure():
    cfg = desk_config()
    for flags in ({"use_cnn": False}, {"use_lstm": False}, {"use_attention": False}):
        model = init_params(replace(cfg, **flags), 0).eval()
        out = model(torch.randn(2, 8, 96))
        assert out.probs.shape == (2, 2)
    out = init_params(replace(cfg, use_attention=False), 0).eval()(torch.randn(2, 8, 96))
    assert torch.equal(out.alpha[0], torch.full((2, 3), 1.0 / 3))


# ---------------------------------------------------------------- init & checkpoints

def test_init_is_seeded():
    a, b, c = (init_params(desk_config(), s) for s in (0, 0, 1))
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa if sa[k].is_floating_point() and sa[k].numel() > 4)


def test_checkpoint_round_trip(tmp_path):
    model = init_params(desk_config(), 3)
    model.centers.fill_(0.5)
    save_checkpoint(model, tmp_path / "m.ckpt", extra={"best_epoch": 7})
    back, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert extra == {"best_epoch": 7}
    assert back.cfg == model.cfg
    sa, sb = model.state_dict(), back.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa if sa[k].is_floating_point())
    save_checkpoint(back, tmp_path / "n.ckpt", extra={"best_epoch": 7})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOTACKPT" + bytes(8))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)
    save_checkpoint(init_params(desk_config(), 0), p)
    raw = p.read_bytes()
    hlen = int.from_bytes(raw[8:12], "little")
    head = raw[12:12 + hlen].replace(b'"fc_hidden": 32', b'"fc_hidden": 31')
    (tmp_path / "y.ckpt").write_bytes(raw[:8] + len(head).to_bytes(4, "little") + head + raw[12 + hlen:])
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_checkpoint(tmp_path / "y.ckpt")
