"""Flat ``key = value`` run configuration files.

One key per line, ``#`` starts a comment. Column layers use ``columnN.field``
keys (N from 1). Lists are comma separated; the event map is
``label:class`` pairs, e.g. ``event_map = T1:0, T2:1``. Unknown keys are errors.
"""

from __future__ import annotations

import configparser
import json
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .config import ColumnSpec, LossWeights, ModelConfig, PUBLISHED_WEIGHTS
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSettings:
    split_kind: str = "loso"
    folds: int = 0  # 0: one fold per subject (loso) / required for kfold
    test_size: int = 0  # 0: partition the subjects into `folds` groups
    repetitions: int = 1
    disjoint_repetitions: bool = False
    split_seed: int = 0
    exclude_subjects: tuple[str, ...] = ()


@dataclass(frozen=True)
class DataSettings:
    event_map: tuple[tuple[str, int], ...] = ()
    trial_duration_s: float = 0.0
    onset_offset_ms: float = 0.0


@dataclass(frozen=True)
class EvalSettings:
    label_fraction: float = 1.0
    mask_seed: int = 0
    fractions: tuple[float, ...] = (0.03, 0.10, 0.30)
    variants: tuple[str, ...] = ("full",)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    weights: LossWeights
    train: TrainConfig
    split: SplitSettings = field(default_factory=SplitSettings)
    data: DataSettings = field(default_factory=DataSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)


_MODEL_KEYS = ("channel_count", "window_len", "step", "upsample_rows", "upsample_cols", "class_count", "fc_hidden",
               "l2_factor", "bn_momentum", "bn_eps", "use_cnn", "use_lstm", "use_attention")
_COLUMN_KEYS = tuple(f.name for f in fields(ColumnSpec))
_SECTIONS = {"train": TrainConfig, "split": SplitSettings, "data": DataSettings, "eval": EvalSettings}
_COLUMN_RE = re.compile(r"column(\d+)\.(\w+)$")


def _convert(text: str, kind, key: str):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(text)
            return low in ("true", "yes", "1")
        if kind in (int, float, str):
            return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None
    raise TypeError(kind)


def _field_types(cls) -> dict[str, type]:
    types = {}
    for f in fields(cls):
        default = f.default if f.default is not f.default_factory else None
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        types[f.name] = (t, default)
    return types


def _parse_value(key: str, text: str, annotation: str):
    ann = annotation.replace(" ", "")
    if key == "event_map":
        pairs = []
        for item in filter(None, (p.strip() for p in text.split(","))):
            label, _, cls = item.rpartition(":")
            if not label:
                raise ConfigError(f"event_map: expected label:class, got {item!r}")
            pairs.append((label.strip(), _convert(cls, int, key)))
        return tuple(pairs)
    if ann.startswith("tuple["):
        inner = ann[len("tuple["):].split(",")[0]
        kind = {"float": float, "int": int, "str": str}[inner]
        return tuple(_convert(p, kind, key) for p in text.split(",") if p.strip())
    kind = {"int": int, "float": float, "str": str, "bool": bool}[ann]
    return _convert(text, kind, key)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str  # keep key case
    try:
        cp.read_string("[run]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    items = dict(cp["run"])

    model_kw, columns, loss_kw = {}, {}, {}
    section_kw = {name: {} for name in _SECTIONS}
    section_types = {name: _field_types(cls) for name, cls in _SECTIONS.items()}
    model_types = _field_types(ModelConfig)
    col_types = _field_types(ColumnSpec)
    for key, raw in items.items():
        if m := _COLUMN_RE.match(key):
            idx, name = int(m.group(1)), m.group(2)
            if name not in _COLUMN_KEYS:
                raise ConfigError(f"{source}: unknown column key {key!r}")
            columns.setdefault(idx, {})[name] = _parse_value(key, raw, col_types[name][0])
        elif key in _MODEL_KEYS:
            model_kw[key] = _parse_value(key, raw, model_types[key][0])
        elif key in ("beta", "eta"):
            loss_kw[key] = tuple(_convert(p, float, key) for p in raw.split(",") if p.strip())
        elif key == "gamma":
            loss_kw[key] = _convert(raw, float, key)
        else:
            for name, types in section_types.items():
                if key in types:
                    section_kw[name][key] = _parse_value(key, raw, types[key][0])
                    break
            else:
                raise ConfigError(f"{source}: unknown key {key!r}")

    if not columns:
        raise ConfigError(f"{source}: no columnN.* keys given")
    if sorted(columns) != list(range(1, len(columns) + 1)):
        raise ConfigError(f"{source}: columns must be numbered 1..M, got {sorted(columns)}")
    specs = []
    for idx in sorted(columns):
        missing = set(_COLUMN_KEYS) - set(columns[idx])
        if missing:
            raise ConfigError(f"{source}: column{idx} missing {sorted(missing)}")
        specs.append(ColumnSpec(**columns[idx]))
    required = {"channel_count", "window_len", "step", "upsample_rows", "class_count"} - set(model_kw)
    if required:
        raise ConfigError(f"{source}: missing model keys {sorted(required)}")
    model = ModelConfig(columns=tuple(specs), **model_kw)
    M = len(specs)
    default_w = PUBLISHED_WEIGHTS if M == 3 else LossWeights((0.2,) * M, (0.1,) * M, 0.3)
    try:
        weights = LossWeights(loss_kw.get("beta", default_w.beta), loss_kw.get("eta", default_w.eta),
                              loss_kw.get("gamma", default_w.gamma))
        if len(weights.beta) != M:
            raise ConfigError(f"{source}: beta/eta need {M} entries (one per column)")
        return RunConfig(
            model=model, weights=weights, train=TrainConfig(**section_kw["train"]),
            split=SplitSettings(**section_kw["split"]), data=DataSettings(**section_kw["data"]),
            eval=EvalSettings(**section_kw["eval"]),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path: str | Path) -> RunConfig:
    """Read a ``.cfg`` file, or the resolved config embedded in a run manifest (JSON)."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        text = json.loads(text)["config_text"]
    return parse_config(text, str(path))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ", ".join(f"{a}:{b}" for a, b in v)
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def dump_config(cfg: RunConfig) -> str:
    """Resolved config as text; ``parse_config(dump_config(c)) == c``."""
    lines = ["# model"]
    for key in _MODEL_KEYS:
        lines.append(f"{key} = {_fmt(getattr(cfg.model, key))}")
    for i, col in enumerate(cfg.model.columns, start=1):
        for key, val in asdict(col).items():
            lines.append(f"column{i}.{key} = {_fmt(val)}")
    lines += ["# loss", f"beta = {_fmt(cfg.weights.beta)}", f"eta = {_fmt(cfg.weights.eta)}",
              f"gamma = {_fmt(cfg.weights.gamma)}"]
    for name in _SECTIONS:
        lines.append(f"# {name}")
        section = getattr(cfg, name)
        for f in fields(section):
            lines.append(f"{f.name} = {_fmt(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: RunConfig, **train_overrides) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, **train_overrides))
