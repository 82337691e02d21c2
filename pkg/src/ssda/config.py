"""Domain types, model/loss configuration, split planning and label masking."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Trial:
    """One epoched motor-imagery trial (channels x samples)."""

    subject_id: str
    trial_id: str
    data: np.ndarray
    label: int | None
    class_count: int

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"trial {self.trial_id}: data must be C x T with C, T >= 1, got {self.data.shape}")
        if self.class_count < 2:
            raise ValueError(f"trial {self.trial_id}: class_count must be >= 2")
        if self.label is not None and not 0 <= self.label < self.class_count:
            raise ValueError(f"trial {self.trial_id}: label {self.label} outside [0, {self.class_count})")
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"trial {self.trial_id}: non-finite samples")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def samples(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class WindowSequence:
    windows: np.ndarray  # n x C x m, a strided view of the source trial
    source_trial_id: str
    m: int
    p: int

    @property
    def n(self) -> int:
        return self.windows.shape[0]


@dataclass(frozen=True)
class ColumnSpec:
    """Layer sizes for one encoder/decoder column."""

    filters: int
    kernel: int
    pool: int
    dropout: float
    lstm_units: int
    lstm_dropout: float
    dec_lstm_units: int
    dec_lstm_dropout: float
    reshape_rows: int
    reshape_cols: int
    dec_filters: int


@dataclass(frozen=True)
class ModelConfig:
    channel_count: int
    window_len: int
    step: int
    upsample_rows: int
    class_count: int
    columns: tuple[ColumnSpec, ...]
    fc_hidden: int = 128
    l2_factor: float = 0.0005
    upsample_cols: int = 4
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3
    # ablation switches
    use_cnn: bool = True
    use_lstm: bool = True
    use_attention: bool = True

    def pooled_width(self, col: ColumnSpec) -> int:
        return (self.window_len - col.kernel + 1) // col.pool

    def window_feature_dim(self, col: ColumnSpec) -> int:
        return col.filters * self.pooled_width(col)

    def latent_dim(self, col: ColumnSpec) -> int:
        return col.lstm_units if self.use_lstm else self.window_feature_dim(col)

    @property
    def concat_dim(self) -> int:
        return sum(self.latent_dim(c) for c in self.columns)

    def n_windows(self, samples: int) -> int:
        return (samples - self.window_len) // self.step + 1


@dataclass(frozen=True)
class LossWeights:
    beta: tuple[float, ...]
    eta: tuple[float, ...]
    gamma: float

    def __post_init__(self):
        if len(self.beta) != len(self.eta):
            raise ValueError("beta and eta must have one entry per column")
        if min((*self.beta, *self.eta, self.gamma)) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def total(self) -> float:
        return float(sum(self.beta) + sum(self.eta) + self.gamma)


PUBLISHED_WEIGHTS = LossWeights(beta=(0.2, 0.1, 0.2), eta=(0.1, 0.1, 0.1), gamma=0.3)


def validate_config(cfg: ModelConfig) -> list[str]:
    """Return a list of human-readable rule violations (empty when valid)."""
    out = []
    for name in ("channel_count", "window_len", "step", "upsample_rows", "upsample_cols", "fc_hidden"):
        if getattr(cfg, name) < 1:
            out.append(f"{name}: must be >= 1")
    if cfg.class_count < 2:
        out.append("class_count: must be >= 2")
    if cfg.l2_factor < 0:
        out.append("l2_factor: must be >= 0")
    if not cfg.columns:
        out.append("columns: at least one column required")
    for i, col in enumerate(cfg.columns, start=1):
        tag = f"column{i}"
        for name in ("filters", "pool", "lstm_units", "dec_lstm_units", "reshape_rows", "reshape_cols", "dec_filters"):
            if getattr(col, name) < 1:
                out.append(f"{tag}.{name}: must be >= 1")
        if not 1 <= col.kernel <= cfg.window_len:
            out.append(f"{tag}.kernel: must lie in [1, window_len]")
        elif col.pool >= 1 and cfg.pooled_width(col) < 1:
            out.append(f"{tag}.pool: pool wider than conv output ({cfg.window_len - col.kernel + 1})")
        for name in ("dropout", "lstm_dropout", "dec_lstm_dropout"):
            if not 0 <= getattr(col, name) < 1:
                out.append(f"{tag}.{name}: must lie in [0, 1)")
        if col.reshape_rows * col.reshape_cols != col.dec_lstm_units:
            out.append(
                f"{tag}.reshape: reshape product {col.reshape_rows}x{col.reshape_cols} "
                f"!= lstm units {col.dec_lstm_units}"
            )
    return out


# Layer table of the published architecture; (C, U) is filled in per dataset.
PUBLISHED_COLUMNS = (
    ColumnSpec(64, 50, 80, 0.5, 64, 0.4, 100, 0.2, 2, 50, 64),
    ColumnSpec(40, 45, 75, 0.5, 40, 0.4, 40, 0.4, 2, 20, 40),
    ColumnSpec(30, 15, 35, 0.5, 30, 0.2, 30, 0.2, 2, 15, 30),
)

DESK_COLUMNS = (
    ColumnSpec(8, 16, 8, 0.2, 12, 0.1, 12, 0.1, 2, 6, 6),
    ColumnSpec(6, 12, 6, 0.2, 8, 0.1, 8, 0.1, 2, 4, 4),
    ColumnSpec(4, 8, 4, 0.2, 6, 0.1, 6, 0.1, 2, 3, 4),
)


def physionet_config() -> ModelConfig:
    return ModelConfig(channel_count=64, window_len=400, step=20, upsample_rows=4, class_count=2, columns=PUBLISHED_COLUMNS)


def bci2a_config() -> ModelConfig:
    return ModelConfig(channel_count=22, window_len=400, step=50, upsample_rows=2, class_count=4, columns=PUBLISHED_COLUMNS)


def desk_config(channel_count: int = 8, class_count: int = 2) -> ModelConfig:
    return ModelConfig(
        channel_count=channel_count,
        window_len=64,
        step=16,
        upsample_rows=2,
        class_count=class_count,
        columns=DESK_COLUMNS,
        fc_hidden=32,
    )


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class Fold:
    index: int
    repetition: int
    train: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class SplitPlan:
    kind: str
    folds: tuple[Fold, ...]
    seed: int

    def to_manifest(self) -> str:
        """One fold per line: index, repetition, train subjects, test subjects (tab separated)."""
        lines = [f"# kind={self.kind} seed={self.seed}"]
        for f in self.folds:
            lines.append(f"{f.index}\t{f.repetition}\t{','.join(f.train)}\t{','.join(f.test)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "SplitPlan":
        rows = text.splitlines()
        head = dict(kv.split("=", 1) for kv in rows[0].lstrip("# ").split())
        folds = []
        for row in rows[1:]:
            if not row.strip():
                continue
            idx, rep, train, test = row.split("\t")
            folds.append(Fold(int(idx), int(rep), tuple(filter(None, train.split(","))), tuple(filter(None, test.split(",")))))
        return cls(head["kind"], tuple(folds), int(head["seed"]))


def make_split_plan(
    subjects: Sequence[str],
    kind: str,
    folds: int,
    seed: int,
    *,
    test_size: int | None = None,
    repetitions: int = 1,
    disjoint: bool = False,
    exclude: Iterable[str] = (),
) -> SplitPlan:
    """Plan subject-level cross-validation folds.

    ``kind="loso"`` needs ``folds == len(subjects)``. ``kind="kfold"`` without
    ``test_size`` partitions the subjects into ``folds`` groups, once per
    repetition. With ``test_size`` every fold draws that many test subjects at
    random, independently per fold unless ``disjoint`` is set.
    """
    dropped = set(exclude)
    subs = sorted(s for s in dict.fromkeys(subjects) if s not in dropped)
    if len(subs) < 2:
        raise ValueError(f"need at least 2 subjects, got {len(subs)}")
    rng = np.random.default_rng(seed)
    out: list[Fold] = []

    def fold(test, rep):
        test_set = set(test)
        return Fold(len(out), rep, tuple(s for s in subs if s not in test_set), tuple(sorted(test)))

    if kind == "loso":
        if folds != len(subs):
            raise ValueError(f"loso requires folds == subject count ({len(subs)}), got {folds}")
        for s in subs:
            out.append(fold([s], 0))
    elif kind == "kfold":
        if folds < 1 or repetitions < 1:
            raise ValueError("folds and repetitions must be >= 1")
        if test_size is None:
            if not 2 <= folds <= len(subs):
                raise ValueError(f"kfold needs 2 <= folds <= {len(subs)}")
            for rep in range(repetitions):
                order = rng.permutation(len(subs))
                for chunk in np.array_split(order, folds):
                    out.append(fold([subs[i] for i in chunk], rep))
        else:
            if not 1 <= test_size < len(subs):
                raise ValueError(f"test_size must lie in [1, {len(subs) - 1}]")
            if disjoint and folds * test_size > len(subs):
                raise ValueError("disjoint draws need folds * test_size <= subject count")
            for rep in range(repetitions):
                if disjoint:
                    order = rng.permutation(len(subs))
                    for k in range(folds):
                        out.append(fold([subs[i] for i in order[k * test_size:(k + 1) * test_size]], rep))
                else:
                    for _ in range(folds):
                        out.append(fold([subs[i] for i in rng.choice(len(subs), test_size, replace=False)], rep))
    else:
        raise ValueError(f"unknown split kind {kind!r}")
    return SplitPlan(kind, tuple(out), seed)


# ---------------------------------------------------------------- label masks

@dataclass(frozen=True)
class LabelMask:
    labeled_ids: frozenset[str]
    unlabeled_ids: frozenset[str]
    fraction: float

    def is_labeled(self, trial_id: str) -> bool:
        return trial_id in self.labeled_ids


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _apportion(total: int, sizes: list[int], floor_one: bool) -> list[int]:
    # largest-remainder allocation of `total` across groups, capped by group size
    n = sum(sizes)
    base = [1 if floor_one else 0 for _ in sizes]
    quotas = [total * s / n for s in sizes]
    alloc = [max(b, min(s, int(math.floor(q)))) for b, s, q in zip(base, sizes, quotas)]
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - math.floor(quotas[i])), i))
    while sum(alloc) < total:
        for i in order:
            if sum(alloc) >= total:
                break
            if alloc[i] < sizes[i]:
                alloc[i] += 1
    while sum(alloc) > total:
        for i in reversed(order):
            if sum(alloc) <= total:
                break
            if alloc[i] > base[i]:
                alloc[i] -= 1
    return alloc


def apply_label_mask(
    trial_ids: Sequence[str],
    fraction: float,
    seed: int,
    labels: Sequence[int | None] | None = None,
) -> LabelMask:
    """Randomly choose ``round(fraction * N)`` trials whose labels may be used.

    When ``labels`` is given the draw is stratified by class and every class
    keeps at least one labeled trial as long as ``fraction * N >= K``.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    ids = list(trial_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("trial ids must be unique")
    n = len(ids)
    if n == 0:
        return LabelMask(frozenset(), frozenset(), fraction)
    target = max(1, _round_half_up(fraction * n))
    rng = np.random.default_rng(seed)
    if labels is None:
        chosen = rng.permutation(n)[:target]
        labeled = {ids[i] for i in chosen}
    else:
        groups: dict[object, list[int]] = {}
        for i, y in enumerate(labels):
            groups.setdefault(-1 if y is None else int(y), []).append(i)
        keys = sorted(groups)
        sizes = [len(groups[k]) for k in keys]
        alloc = _apportion(target, sizes, floor_one=fraction * n >= len(keys))
        labeled = set()
        for k, a in zip(keys, alloc):
            members = groups[k]
            labeled.update(ids[members[i]] for i in rng.permutation(len(members))[:a])
    return LabelMask(frozenset(labeled), frozenset(set(ids) - labeled), fraction)


__all__ = [
    "Trial", "WindowSequence", "ColumnSpec", "ModelConfig", "LossWeights", "PUBLISHED_WEIGHTS",
    "validate_config", "physionet_config", "bci2a_config", "desk_config",
    "Fold", "SplitPlan", "make_split_plan", "LabelMask", "apply_label_mask",
]
