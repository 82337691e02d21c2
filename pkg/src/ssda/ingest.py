"""Recording readers (EDF/EDF+, EEGA arrays), epoching and synthetic data."""

from __future__ import annotations

import json
import logging
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .config import Trial

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Recording:
    channel_labels: tuple[str, ...]
    fs: float
    signals: np.ndarray  # C x L, microvolts
    annotations: tuple[tuple[float, str], ...] = ()

    def __post_init__(self):
        if self.signals.ndim != 2 or self.signals.shape[0] != len(self.channel_labels):
            raise ValueError("signals must be C x L with one label per channel")
        if not self.fs > 0:
            raise ValueError(f"sampling rate must be positive, got {self.fs}")
        duration = self.signals.shape[1] / self.fs
        for onset, label in self.annotations:
            if not 0 <= onset <= duration:
                raise ValueError(f"annotation {label!r} at {onset}s outside recording [0, {duration}]")


class FormatError(ValueError):
    """Malformed input file; ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path, self.offset = str(path), offset


# ---------------------------------------------------------------- EDF

EDF_ANNOTATION_LABEL = "EDF Annotations"
_UNIT_TO_UV = {"uv": 1.0, "µv": 1.0, "μv": 1.0, "mv": 1e3, "v": 1e6, "nv": 1e-3}

# per-signal header fields: (name, width)
_SIGNAL_FIELDS = (
    ("label", 16), ("transducer", 80), ("physical_dim", 8), ("physical_min", 8), ("physical_max", 8),
    ("digital_min", 8), ("digital_max", 8), ("prefilter", 80), ("samples_per_record", 8), ("reserved", 32),
)


@dataclass
class EDFHeader:
    version: str
    patient: str
    recording: str
    start_date: str
    start_time: str
    header_bytes: int
    reserved: str
    record_count: int
    record_duration: float
    signal_count: int
    signals: list[dict] = field(default_factory=list)


def _field(raw: bytes, start: int, width: int, path) -> str:
    chunk = raw[start:start + width]
    if len(chunk) < width:
        raise FormatError(path, len(raw), "truncated header")
    return chunk.decode("ascii", errors="replace")


def _number(text: str, kind, path, offset: int, name: str):
    try:
        return kind(text.strip())
    except ValueError:
        raise FormatError(path, offset, f"non-numeric header field {name}: {text!r}") from None


def read_edf_header(raw: bytes, path="<bytes>") -> EDFHeader:
    if len(raw) < 256:
        raise FormatError(path, len(raw), "truncated header")
    if raw[0] == 0xFF:
        raise FormatError(path, 0, "unsupported sample width (24-bit BDF)")
    f = lambda a, w: _field(raw, a, w, path)  # noqa: E731
    hdr = EDFHeader(
        version=f(0, 8), patient=f(8, 80), recording=f(88, 80), start_date=f(168, 8), start_time=f(176, 8),
        header_bytes=_number(f(184, 8), int, path, 184, "header bytes"),
        reserved=f(192, 44),
        record_count=_number(f(236, 8), int, path, 236, "number of records"),
        record_duration=_number(f(244, 8), float, path, 244, "record duration"),
        signal_count=_number(f(252, 4), int, path, 252, "number of signals"),
    )
    ns = hdr.signal_count
    if ns < 1:
        raise FormatError(path, 252, f"bad signal count {ns}")
    if len(raw) < 256 + 256 * ns:
        raise FormatError(path, len(raw), "truncated header")
    if hdr.header_bytes != 256 * (ns + 1):
        raise FormatError(path, 184, f"header size {hdr.header_bytes} != 256 * (signals + 1)")
    hdr.signals = [{} for _ in range(ns)]
    offset = 256
    for name, width in _SIGNAL_FIELDS:
        for i in range(ns):
            text = f(offset, width)
            if name in ("physical_min", "physical_max"):
                hdr.signals[i][name] = _number(text, float, path, offset, name)
            elif name in ("digital_min", "digital_max", "samples_per_record"):
                hdr.signals[i][name] = _number(text, int, path, offset, name)
            else:
                hdr.signals[i][name] = text.strip() if name != "reserved" else text
            offset += width
    return hdr


def digital_to_physical(digital: np.ndarray, pmin: float, pmax: float, dmin: int, dmax: int) -> np.ndarray:
    """Linear map sending [dmin, dmax] onto [pmin, pmax]."""
    return pmin + (digital.astype(np.float64) - dmin) * ((pmax - pmin) / (dmax - dmin))


_TAL = re.compile(r"([+-]\d+(?:\.\d*)?)(?:\x15(\d+(?:\.\d*)?))?\x14((?:[^\x00]*?\x14)*)\x00")


def parse_tal(block: bytes) -> list[tuple[float, float | None, list[str]]]:
    """Split an EDF+ annotation block into (onset, duration, texts) entries."""
    out = []
    for m in _TAL.finditer(block.decode("utf-8", errors="replace")):
        texts = [t for t in m.group(3).split("\x14") if t]
        out.append((float(m.group(1)), float(m.group(2)) if m.group(2) else None, texts))
    return out


def read_edf(path: str | Path) -> Recording:
    """Parse an EDF/EDF+ (continuous) file into a Recording in microvolts."""
    raw = Path(path).read_bytes()
    hdr = read_edf_header(raw, path)
    sigs = hdr.signals
    per_record = [s["samples_per_record"] for s in sigs]
    record_bytes = 2 * sum(per_record)
    data_bytes = len(raw) - hdr.header_bytes
    n_rec = hdr.record_count
    if n_rec == -1 and record_bytes and data_bytes % record_bytes == 0:
        n_rec = data_bytes // record_bytes
    if n_rec < 0 or record_bytes == 0 or data_bytes != n_rec * record_bytes:
        raise FormatError(
            path, hdr.header_bytes,
            f"record-size mismatch: {data_bytes} data bytes for {hdr.record_count} records of {record_bytes} bytes",
        )
    ann_idx = [i for i, s in enumerate(sigs) if s["label"] == EDF_ANNOTATION_LABEL]
    data_idx = [i for i in range(len(sigs)) if i not in ann_idx]
    if not data_idx:
        raise FormatError(path, 256, "no data signals")
    spr = {per_record[i] for i in data_idx}
    if len(spr) != 1:
        raise FormatError(path, 256, "non-uniform sample rates are not supported")
    if not hdr.record_duration > 0:
        raise FormatError(path, 244, f"bad record duration {hdr.record_duration}")
    for i in data_idx:
        if sigs[i]["digital_max"] <= sigs[i]["digital_min"]:
            raise FormatError(path, 256, f"signal {sigs[i]['label']!r}: digital max <= digital min")

    body = np.frombuffer(raw, dtype="<i2", offset=hdr.header_bytes).reshape(n_rec, -1)
    starts = np.concatenate([[0], np.cumsum(per_record)])
    signals = []
    for i in data_idx:
        s = sigs[i]
        digital = body[:, starts[i]:starts[i + 1]].reshape(-1)
        phys = digital_to_physical(digital, s["physical_min"], s["physical_max"], s["digital_min"], s["digital_max"])
        signals.append(phys * _UNIT_TO_UV.get(s["physical_dim"].lower(), 1.0))

    annotations = []
    for i in ann_idx:
        for r in range(n_rec):
            block = body[r, starts[i]:starts[i + 1]].tobytes()
            for k, (onset, _dur, texts) in enumerate(parse_tal(block)):
                if k == 0 and not texts:
                    continue  # record time-keeping entry
                annotations.extend((onset, t) for t in texts)
    annotations.sort(key=lambda a: a[0])
    fs = spr.pop() / hdr.record_duration
    return Recording(
        channel_labels=tuple(sigs[i]["label"] for i in data_idx),
        fs=fs,
        signals=np.vstack(signals),
        annotations=tuple(annotations),
    )


# ---------------------------------------------------------------- EEGA array format
#
# All little-endian:
#   b"EEGA", uint8 version (=1)
#   uint32 C, uint32 L, float64 fs
#   C x (uint16 byte length, UTF-8 channel label)
#   C*L float32 samples, row-major (channel by channel)
#   uint32 A, then A x (float64 onset seconds, uint16 byte length, UTF-8 label)

ARRAY_MAGIC = b"EEGA"
ARRAY_VERSION = 1


def write_array_file(rec: Recording, path: str | Path) -> None:
    C, L = rec.signals.shape
    parts = [ARRAY_MAGIC, struct.pack("<BIId", ARRAY_VERSION, C, L, rec.fs)]
    for label in rec.channel_labels:
        b = label.encode()
        parts.append(struct.pack("<H", len(b)) + b)
    parts.append(np.ascontiguousarray(rec.signals, dtype="<f4").tobytes())
    parts.append(struct.pack("<I", len(rec.annotations)))
    for onset, label in rec.annotations:
        b = label.encode()
        parts.append(struct.pack("<dH", onset, len(b)) + b)
    Path(path).write_bytes(b"".join(parts))


def read_array_file(path: str | Path) -> Recording:
    raw = Path(path).read_bytes()
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise FormatError(path, pos, "size mismatch: file truncated")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    def text():
        nonlocal pos
        (n,) = take("<H")
        if pos + n > len(raw):
            raise FormatError(path, pos, "size mismatch: file truncated")
        s = raw[pos:pos + n].decode()
        pos += n
        return s

    if raw[:4] != ARRAY_MAGIC:
        raise FormatError(path, 0, "bad magic")
    pos = 4
    version, C, L, fs = take("<BIId")
    if version != ARRAY_VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    if C == 0:
        raise FormatError(path, 5, "bad channel count")
    labels = tuple(text() for _ in range(C))
    nbytes = 4 * C * L
    if pos + nbytes > len(raw):
        raise FormatError(path, pos, f"size mismatch: need {nbytes} sample bytes, have {len(raw) - pos}")
    signals = np.frombuffer(raw, dtype="<f4", count=C * L, offset=pos).reshape(C, L).astype(np.float32)
    pos += nbytes
    (count,) = take("<I")
    annotations = []
    for _ in range(count):
        (onset,) = take("<d")
        annotations.append((onset, text()))
    if pos != len(raw):
        raise FormatError(path, pos, f"size mismatch: {len(raw) - pos} trailing bytes")
    return Recording(labels, fs, signals, tuple(annotations))


def read_recording(path: str | Path) -> Recording:
    """Dispatch on file content: EEGA magic or EDF."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    return read_array_file(path) if head == ARRAY_MAGIC else read_edf(path)


# ---------------------------------------------------------------- epoching

def epoch(rec: Recording, event_labels: Mapping[str, int], duration_s: float, *, subject_id: str = "S0",
          session: str = "R0", class_count: int | None = None, onset_offset_s: float = 0.0) -> list[Trial]:
    """Cut one trial of ``duration_s`` seconds at every annotation listed in ``event_labels``.

    Trials that would run past the end of the recording are dropped (logged).
    Trial ids are ``subject/session/index`` with the annotation index.
    """
    T = int(round(duration_s * rec.fs))
    if T < 1:
        raise ValueError(f"duration {duration_s}s is shorter than one sample at {rec.fs} Hz")
    K = class_count if class_count is not None else max(event_labels.values(), default=0) + 1
    trials, dropped = [], 0
    L = rec.signals.shape[1]
    for idx, (onset, label) in enumerate(rec.annotations):
        if label not in event_labels:
            continue
        start = int(round((onset + onset_offset_s) * rec.fs))
        if start < 0 or start + T > L:
            dropped += 1
            continue
        trials.append(Trial(
            subject_id=subject_id,
            trial_id=f"{subject_id}/{session}/{idx}",
            data=np.array(rec.signals[:, start:start + T]),
            label=int(event_labels[label]),
            class_count=max(K, 2),
        ))
    if dropped:
        log.warning("epoch: dropped %d trial(s) extending past the recording end", dropped)
    return trials


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SynthSpec:
    subject_count: int = 4
    trials_per_subject: int = 20
    C: int = 8
    T: int = 128
    K: int = 2
    class_signal_snr: float = math.inf
    seed: int = 0
    fs: float = 128.0
    subject_mixing: float = 0.3

    def __post_init__(self):
        for name in ("subject_count", "trials_per_subject", "C", "T"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.class_signal_snr < 0:
            raise ValueError("snr must be >= 0")


def synth_generate(spec: SynthSpec) -> tuple[list[Trial], dict]:
    """Class-specific oscillatory spatial patterns under per-subject mixing plus white noise.

    Each class k owns a unit-norm spatial pattern a_k, a frequency f_k and a
    phase. Subject s sees the mixed pattern (I + mixing * G_s) a_k, and every
    trial gets its own amplitude jitter. ``class_signal_snr`` is the
    signal-to-noise power ratio (inf: no noise, 0: noise only).
    """
    rng = np.random.default_rng(spec.seed)
    C, T, K = spec.C, spec.T, spec.K
    patterns = rng.standard_normal((K, C))
    patterns /= np.linalg.norm(patterns, axis=1, keepdims=True)
    freqs = 6.0 + 4.0 * np.arange(K) + rng.uniform(0, 1, K)
    phases = rng.uniform(0, 2 * np.pi, K)
    t = np.arange(T) / spec.fs
    waves = np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])  # K x T
    snr = spec.class_signal_snr
    trials = []
    width = len(str(spec.subject_count))
    for s in range(spec.subject_count):
        sid = f"S{s + 1:0{width}d}"
        mixing = np.eye(C) + spec.subject_mixing * rng.standard_normal((C, C)) / np.sqrt(C)
        labels = np.arange(spec.trials_per_subject) % K
        rng.shuffle(labels)
        for i, k in enumerate(labels):
            amp = rng.uniform(0.8, 1.2)
            u = mixing @ patterns[k]
            signal = amp * np.outer(u / np.linalg.norm(u), waves[k]) * np.sqrt(2.0 * C)  # ~unit mean power
            noise = rng.standard_normal((C, T))
            if math.isinf(snr):
                x = signal
            elif snr == 0:
                x = noise
            else:
                x = math.sqrt(snr) * signal + noise
            trials.append(Trial(sid, f"{sid}/synth/{i}", x.astype(np.float32), int(k), K))
    truth = {
        "patterns": patterns.tolist(),
        "frequencies": freqs.tolist(),
        "phases": phases.tolist(),
        "snr": snr,
    }
    return trials, truth


def parse_synth_spec(text: str) -> SynthSpec:
    """``"subjects=4,trials=20,C=8,T=128,K=2,snr=inf,seed=0"`` -> SynthSpec."""
    aliases = {"subjects": "subject_count", "trials": "trials_per_subject", "snr": "class_signal_snr",
               "mixing": "subject_mixing"}
    kwargs = {}
    for item in filter(None, (p.strip() for p in text.split(","))):
        key, _, val = item.partition("=")
        key = aliases.get(key.strip(), key.strip())
        if key not in SynthSpec.__dataclass_fields__:
            raise ValueError(f"unknown synth key {key!r}")
        kind = float if key in ("class_signal_snr", "fs", "subject_mixing") else int
        kwargs[key] = kind(val)
    return SynthSpec(**kwargs)


# ---------------------------------------------------------------- dataset container
#
#   b"SSDADATA", uint32 JSON length H, H bytes UTF-8 JSON
#   {"shape": [N, C, T], "class_count": K, "subjects": [...], "trial_ids": [...],
#    "labels": [int or null], "meta": {...}}
#   then N*C*T little-endian float32 samples.

DATA_MAGIC = b"SSDADATA"


def save_dataset(trials: Sequence[Trial], path: str | Path, meta: dict | None = None) -> None:
    shapes = {t.data.shape for t in trials}
    if len(shapes) > 1:
        raise ValueError(f"all trials must share one shape, got {sorted(shapes)}")
    shape = [len(trials), *(shapes.pop() if shapes else (0, 0))]
    header = json.dumps({
        "shape": shape,
        "class_count": trials[0].class_count if trials else 2,
        "subjects": [t.subject_id for t in trials],
        "trial_ids": [t.trial_id for t in trials],
        "labels": [t.label for t in trials],
        "meta": meta or {},
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC + struct.pack("<I", len(header)) + header)
        for t in trials:
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_dataset(path: str | Path) -> tuple[list[Trial], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != DATA_MAGIC:
        raise FormatError(path, 0, "bad dataset magic")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + hlen])
    N, C, T = header["shape"]
    body = raw[12 + hlen:]
    if len(body) != 4 * N * C * T:
        raise FormatError(path, 12 + hlen, f"size mismatch: {len(body)} bytes for {N}x{C}x{T} float32")
    data = np.frombuffer(body, dtype="<f4").reshape(N, C, T)
    trials = [
        Trial(s, tid, data[i].astype(np.float32), y, header["class_count"])
        for i, (s, tid, y) in enumerate(zip(header["subjects"], header["trial_ids"], header["labels"]))
    ]
    return trials, header["meta"]
