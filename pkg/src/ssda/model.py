"""Columnar spatio-temporal auto-encoder with an attached classifier head.

Every column runs the same pipeline at its own kernel scale:

    window (1 x C x m) -> conv(C x k, valid, ReLU) -> BN -> maxpool(1 x w)
      -> dropout -> flatten -> LSTM over the n windows -> attention pool -> v

and decodes ``v`` back to n windows:

    v repeated n times -> LSTM -> reshape(1 x r x c) -> upsample(U, 4)
      -> BN -> conv 7x7 (same, ReLU) -> BN -> bilinear resize to C x m -> conv 1x1
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ColumnSpec, ModelConfig, validate_config
from .windowing import slice_batch


def attention_pool(h: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax attention over the step axis.

    h: (..., n, d); weight: (1, d); bias: (1,). Returns alpha (..., n) and the
    pooled vector v (..., d).
    """
    scores = (h * weight.squeeze(0)).sum(dim=-1) + bias  # same reduction order for every step
    scores = scores - scores.max(dim=-1, keepdim=True).values.detach()
    e = scores.exp()
    alpha = e / e.sum(dim=-1, keepdim=True)
    v = (alpha.unsqueeze(-1) * h).sum(dim=-2)
    return alpha, v


class _BatchNorm(nn.BatchNorm2d):
    # Keras-style momentum: running = momentum * running + (1 - momentum) * batch
    def __init__(self, channels: int, momentum: float, eps: float):
        super().__init__(channels, eps=eps, momentum=1.0 - momentum)


class Column(nn.Module):
    def __init__(self, cfg: ModelConfig, spec: ColumnSpec):
        super().__init__()
        self.cfg, self.spec = cfg, spec
        C, m = cfg.channel_count, cfg.window_len
        width = cfg.window_feature_dim(spec)
        if cfg.use_cnn:
            self.conv = nn.Conv2d(1, spec.filters, kernel_size=(C, spec.kernel))
            self.bn = _BatchNorm(spec.filters, cfg.bn_momentum, cfg.bn_eps)
        else:
            self.project = nn.Linear(C * m, width)
        self.drop = nn.Dropout(spec.dropout)
        d = cfg.latent_dim(spec)
        if cfg.use_lstm:
            self.lstm_drop = nn.Dropout(spec.lstm_dropout)
            self.lstm = nn.LSTM(width, spec.lstm_units, batch_first=True)
        if cfg.use_attention:
            self.att_weight = nn.Parameter(torch.empty(1, d))
            self.att_bias = nn.Parameter(torch.zeros(1))
        self.dec_drop = nn.Dropout(spec.dec_lstm_dropout)
        self.dec_lstm = nn.LSTM(d, spec.dec_lstm_units, batch_first=True)
        self.dec_bn1 = _BatchNorm(1, cfg.bn_momentum, cfg.bn_eps)
        self.dec_conv = nn.Conv2d(1, spec.dec_filters, kernel_size=7, padding=3)
        self.dec_bn2 = _BatchNorm(spec.dec_filters, cfg.bn_momentum, cfg.bn_eps)
        self.dec_out = nn.Conv2d(spec.dec_filters, 1, kernel_size=1)

    def window_features(self, windows: torch.Tensor) -> torch.Tensor:
        """(B, n, C, m) -> (B, n, width)."""
        B, n, C, m = windows.shape
        x = windows.reshape(B * n, 1, C, m)
        if self.cfg.use_cnn:
            x = self.bn(F.relu(self.conv(x)))
            x = F.max_pool2d(x, kernel_size=(1, self.spec.pool))
        else:
            x = F.relu(self.project(x.reshape(B * n, C * m)))
        return self.drop(x).reshape(B, n, -1)

    def encode(self, windows: torch.Tensor):
        """Returns (h_enc (B, n, d), alpha (B, n), v (B, d))."""
        q = self.window_features(windows)
        h = self.lstm(self.lstm_drop(q))[0] if self.cfg.use_lstm else q
        if self.cfg.use_attention:
            alpha, v = attention_pool(h, self.att_weight, self.att_bias)
        else:
            alpha = torch.full(h.shape[:2], 1.0 / h.shape[1], dtype=h.dtype)
            v = h.mean(dim=1)
        return h, alpha, v

    def decode(self, v: torch.Tensor, n: int) -> torch.Tensor:
        """(B, d) -> reconstructed windows (B, n, C, m)."""
        cfg, spec = self.cfg, self.spec
        B = v.shape[0]
        h_dec = self.dec_lstm(self.dec_drop(v.unsqueeze(1).expand(B, n, v.shape[1])))[0]
        x = h_dec.reshape(B * n, 1, spec.reshape_rows, spec.reshape_cols)
        x = F.interpolate(x, scale_factor=(cfg.upsample_rows, cfg.upsample_cols), mode="nearest")
        x = self.dec_bn1(x)
        x = self.dec_bn2(F.relu(self.dec_conv(x)))
        x = F.interpolate(x, size=(cfg.channel_count, cfg.window_len), mode="bilinear", align_corners=False)
        return self.dec_out(x).reshape(B, n, cfg.channel_count, cfg.window_len)


class Classifier(nn.Module):
    def __init__(self, in_dim: int, hidden: int, classes: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, classes)
        self.register_buffer("centers", torch.zeros(classes, hidden))

    def forward(self, z: torch.Tensor):
        features = F.relu(self.fc1(z))
        logits = self.fc2(features)
        return features, logits, torch.softmax(logits, dim=-1)


@dataclass
class ForwardOutput:
    windows: torch.Tensor          # (B, n, C, m)
    h_enc: list[torch.Tensor]      # per column (B, n, d)
    alpha: list[torch.Tensor]      # per column (B, n)
    latents: list[torch.Tensor]    # per column (B, d)
    recon: list[torch.Tensor]      # per column (B, n, C, m); empty when decoding is skipped
    features: torch.Tensor         # (B, fc_hidden)
    logits: torch.Tensor
    probs: torch.Tensor

    @property
    def concat(self) -> torch.Tensor:
        return torch.cat(self.latents, dim=-1)


class SSDA(nn.Module):
    """Encoder columns, per-column decoders and the two-layer classifier."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        problems = validate_config(cfg)
        if problems:
            raise ValueError("invalid model config: " + "; ".join(problems))
        self.cfg = cfg
        self.columns = nn.ModuleList(Column(cfg, spec) for spec in cfg.columns)
        self.classifier = Classifier(cfg.concat_dim, cfg.fc_hidden, cfg.class_count)

    def forward(self, x: torch.Tensor, decode: bool = True) -> ForwardOutput:
        """x: (B, C, T) raw trials."""
        cfg = self.cfg
        if x.ndim != 3 or x.shape[1] != cfg.channel_count:
            raise ValueError(f"expected (B, {cfg.channel_count}, T) input, got {tuple(x.shape)}")
        windows = slice_batch(x, cfg.window_len, cfg.step)
        n = windows.shape[1]
        hs, alphas, vs, recon = [], [], [], []
        for col in self.columns:
            h, a, v = col.encode(windows)
            hs.append(h)
            alphas.append(a)
            vs.append(v)
            if decode:
                recon.append(col.decode(v, n))
        features, logits, probs = self.classifier(torch.cat(vs, dim=-1))
        return ForwardOutput(windows, hs, alphas, vs, recon, features, logits, probs)

    def l2_penalty(self) -> torch.Tensor:
        return self.cfg.l2_factor * self.classifier.fc2.weight.pow(2).sum()

    @property
    def centers(self) -> torch.Tensor:
        return self.classifier.centers


def _fan_in_uniform_(w: torch.Tensor, fan_in: int, gen: torch.Generator):
    bound = math.sqrt(3.0 / fan_in)
    with torch.no_grad():
        w.copy_(torch.rand(w.shape, generator=gen, dtype=w.dtype) * 2 * bound - bound)


def init_params(cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> SSDA:
    """Build a model with deterministic fan-in scaled uniform weights and zero biases."""
    model = SSDA(cfg).to(dtype)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, nn.BatchNorm2d):
                mod.reset_parameters()  # scale 1, shift 0, running stats (0, 1)
            elif isinstance(mod, (nn.Conv2d, nn.Linear)):
                _fan_in_uniform_(mod.weight, mod.weight[0].numel(), gen)
                mod.bias.zero_()
            elif isinstance(mod, nn.LSTM):
                for name, p in mod.named_parameters():
                    if name.startswith("bias"):
                        p.zero_()
                    else:
                        _fan_in_uniform_(p, p.shape[1], gen)
            elif isinstance(mod, Column) and cfg.use_attention:
                _fan_in_uniform_(mod.att_weight, mod.att_weight.shape[1], gen)
                mod.att_bias.zero_()
        model.centers.zero_()
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------- checkpoints
#
# Layout (all little-endian):
#   b"SSDACKPT"  8-byte magic
#   uint32       JSON header length H
#   H bytes      UTF-8 JSON: {"config": ModelConfig, "extra": {...},
#                 "tensors": [{"name", "shape", "offset"}...]}
#   payload      float32 tensors, C order, at the recorded byte offsets

CKPT_MAGIC = b"SSDACKPT"


class CheckpointError(ValueError):
    pass


def config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["columns"] = tuple(ColumnSpec(**c) for c in d["columns"])
    return ModelConfig(**d)


def save_checkpoint(model: SSDA, path: str | Path, extra: dict | None = None) -> None:
    state = model.state_dict()
    entries, blobs, offset = [], [], 0
    for name, t in state.items():
        if not t.is_floating_point():
            continue  # num_batches_tracked
        data = t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"config": config_to_dict(model.cfg), "extra": extra or {}, "tensors": entries}, sort_keys=True
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(header)) + header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> tuple[SSDA, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + hlen])
    payload = memoryview(raw)[12 + hlen:]
    model = SSDA(config_from_dict(header["config"])).to(dtype)
    state = model.state_dict()
    seen = set()
    for e in header["tensors"]:
        name, shape = e["name"], tuple(e["shape"])
        if name not in state:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}")
        if tuple(state[name].shape) != shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}: file {shape}, model {tuple(state[name].shape)}")
        count = math.prod(shape)
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"]).reshape(shape)
        state[name] = torch.from_numpy(arr.copy()).to(dtype)
        seen.add(name)
    missing = [k for k, t in state.items() if t.is_floating_point() and k not in seen]
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing}")
    model.load_state_dict(state)
    return model, header["extra"]
