"""Sliding windows over aligned signal sequences and train-only standardization."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .ingest import Cohort, SignalSequence

log = logging.getLogger(__name__)

N_CHANNELS = 4


class DegenerateChannelError(ValueError):
    pass


class LeakageError(RuntimeError):
    pass


@dataclass(frozen=True)
class WindowingConfig:
    window_size: int
    stride: int

    def __post_init__(self):
        if self.window_size < 1 or self.stride < 1:
            raise ValueError("window_size and stride must be >= 1")

    def to_dict(self):
        return {"window_size": self.window_size, "stride": self.stride}


@dataclass(frozen=True, eq=False)
class Window:
    subject_id: str
    session_id: str
    start: int
    values: np.ndarray  # (W, 4): ht, ft, pp, rr


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple[float, float, float, float]
    std: tuple[float, float, float, float]
    # subjects whose windows were used in the fit
    fitted_on: frozenset = field(default_factory=frozenset)

    def check_disjoint(self, subject_ids: Iterable[str]) -> None:
        overlap = self.fitted_on.intersection(subject_ids)
        if overlap:
            raise LeakageError(f"stats were fitted on evaluated subjects: {sorted(overlap)[:5]}")

    def to_dict(self):
        return {"mean": list(self.mean), "std": list(self.std), "fitted_on": sorted(self.fitted_on)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["mean"]), tuple(d["std"]), frozenset(d.get("fitted_on", ())))


def window_count(length: int, cfg: WindowingConfig) -> int:
    if length < cfg.window_size:
        return 0
    return (length - cfg.window_size) // cfg.stride + 1


def _starts(length: int, cfg: WindowingConfig) -> np.ndarray:
    return np.arange(window_count(length, cfg)) * cfg.stride


def slide(seq: SignalSequence, cfg: WindowingConfig) -> list[Window]:
    m = seq.matrix()
    return [
        Window(seq.subject_id, seq.session_id, int(s), m[s:s + cfg.window_size].copy())
        for s in _starts(len(seq), cfg)
    ]


def fit_stats(train_windows: Sequence[Window]) -> ChannelStats:
    """Population mean/std per channel over every cell of the training windows."""
    if not train_windows:
        raise ValueError("at least one window is needed to fit channel statistics")
    cells = np.concatenate([w.values for w in train_windows], axis=0)
    return _stats_from_cells(cells, frozenset(w.subject_id for w in train_windows))


def _stats_from_cells(cells: np.ndarray, subjects: frozenset) -> ChannelStats:
    # fsum: exact sums, so the fit does not depend on window order
    n = cells.shape[0]
    mean = [math.fsum(cells[:, c]) / n for c in range(N_CHANNELS)]
    std = [
        math.sqrt(math.fsum((cells[:, c] - mean[c]) ** 2) / n) for c in range(N_CHANNELS)
    ]
    for c, s in enumerate(std):
        if not s > 0:
            raise DegenerateChannelError(f"channel {c} has zero variance in the training windows")
    return ChannelStats(tuple(mean), tuple(std), subjects)


def standardize(w: Window, stats: ChannelStats) -> Window:
    return Window(w.subject_id, w.session_id, w.start, standardize_array(w.values, stats))


def standardize_array(x: np.ndarray, stats: ChannelStats) -> np.ndarray:
    return (x - np.asarray(stats.mean)) / np.asarray(stats.std)


def destandardize_array(x: np.ndarray, stats: ChannelStats) -> np.ndarray:
    return x * np.asarray(stats.std) + np.asarray(stats.mean)


@dataclass
class WindowSet:
    """Windows of a cohort stacked into arrays, ready for batching."""

    X: np.ndarray  # (n, W, 4)
    subjects: np.ndarray  # (n,) object
    sessions: np.ndarray  # (n,) object
    y: np.ndarray  # (n,) int
    labels: dict  # subject -> label, including subjects without windows
    skipped_subjects: list  # subjects with no window at all

    def __len__(self):
        return self.X.shape[0]

    def select(self, subject_ids: Iterable[str]) -> "WindowSet":
        keep = set(subject_ids)
        mask = np.array([s in keep for s in self.subjects], dtype=bool)
        return WindowSet(
            self.X[mask], self.subjects[mask], self.sessions[mask], self.y[mask],
            {k: v for k, v in self.labels.items() if k in keep},
            [s for s in self.skipped_subjects if s in keep],
        )

    def fit_stats(self) -> ChannelStats:
        if len(self) == 0:
            raise ValueError("at least one window is needed to fit channel statistics")
        return _stats_from_cells(self.X.reshape(-1, N_CHANNELS), frozenset(self.subjects.tolist()))

    def standardized(self, stats: ChannelStats, held_out: bool = False) -> "WindowSet":
        """Standardize with ``stats``; ``held_out`` asserts no subject overlap with the fit."""
        if held_out:
            stats.check_disjoint(self.subjects.tolist())
        return WindowSet(standardize_array(self.X, stats), self.subjects, self.sessions,
                         self.y, self.labels, self.skipped_subjects)


def cohort_windows(cohort: Cohort, cfg: WindowingConfig) -> WindowSet:
    """Slide every session of ``cohort``; sessions shorter than W are skipped."""
    xs, subj, sess, ys = [], [], [], []
    skipped = []
    for s in cohort.subjects:
        n_before = len(xs)
        for seq in s.sessions:
            n = window_count(len(seq), cfg)
            if n == 0:
                continue
            view = sliding_window_view(seq.matrix(), cfg.window_size, axis=0)[:: cfg.stride]
            # view: (n, 4, W)
            xs.extend(np.ascontiguousarray(view.transpose(0, 2, 1)))
            subj.extend([s.subject_id] * n)
            sess.extend([seq.session_id] * n)
            ys.extend([s.label] * n)
        if len(xs) == n_before:
            skipped.append(s.subject_id)
    if skipped:
        log.warning("%d subject(s) have no session of length >= %d: %s",
                    len(skipped), cfg.window_size, skipped[:10])
    W = cfg.window_size
    X = np.stack(xs) if xs else np.zeros((0, W, N_CHANNELS))
    return WindowSet(
        X,
        np.array(subj, dtype=object),
        np.array(sess, dtype=object),
        np.array(ys, dtype=np.int64),
        cohort.labels,
        skipped,
    )
