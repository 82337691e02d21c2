"""Overlapping temporal slices of a trial."""

from __future__ import annotations

import numpy as np
import torch

from .config import Trial, WindowSequence


def window_count(samples: int, m: int, p: int) -> int:
    if not 1 <= m <= samples:
        raise ValueError(f"window length {m} must lie in [1, {samples}]")
    if p < 1:
        raise ValueError(f"step must be >= 1, got {p}")
    return (samples - m) // p + 1


def slice_trial(trial: Trial, m: int, p: int) -> WindowSequence:
    """Cut ``trial`` into windows of ``m`` samples every ``p`` samples.

    ``p`` is a step (not an overlap). Samples after the last full window are
    dropped. Windows are read-only views into ``trial.data``.
    """
    n = window_count(trial.samples, m, p)
    view = np.lib.stride_tricks.sliding_window_view(trial.data, m, axis=1)  # C x (T-m+1) x m
    windows = view[:, : (n - 1) * p + 1 : p, :].transpose(1, 0, 2)
    return WindowSequence(windows=windows, source_trial_id=trial.trial_id, m=m, p=p)


def slice_batch(x: torch.Tensor, m: int, p: int) -> torch.Tensor:
    """Batched equivalent of :func:`slice_trial`: B x C x T -> B x n x C x m."""
    n = window_count(x.shape[-1], m, p)
    return x.unfold(-1, m, p)[..., :n, :].permute(0, 2, 1, 3)
