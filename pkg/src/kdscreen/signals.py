"""Derivation of the four keystroke channels and the task-dependent cleaning rules."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import (
    LOW_TYPING_RATE,
    TOO_SHORT,
    EMPTY,
    Cohort,
    SessionEvents,
    SignalSequence,
    Subject,
    TaskKind,
    ValidationReport,
)


class SignalError(ValueError):
    pass


@dataclass(frozen=True)
class CleaningConfig:
    task_kind: TaskKind = TaskKind.FIXED_TEXT
    min_typing_rate: float = 20.0  # characters per minute
    ft_outlier_cap: float = 3.0  # seconds
    session_gap: float = 30.0  # seconds

    def __post_init__(self):
        object.__setattr__(self, "task_kind", TaskKind(self.task_kind))
        for name in ("min_typing_rate", "ft_outlier_cap", "session_gap"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")


def derive_signals(s: SessionEvents) -> SignalSequence:
    """Digraph channels for consecutive events (i-1, i), i >= 1.

    ht uses the hold of the second key of each digraph, so the first event's
    hold time is dropped and all four channels have ``len(s) - 1`` steps.
    """
    if len(s) < 2:
        raise SignalError(f"session {s.session_id!r} has {len(s)} event(s); at least 2 are needed")
    p, r = s.press, s.release
    ht = r[1:] - p[1:]
    ft = p[1:] - r[:-1]
    pp = p[1:] - p[:-1]
    rr = r[1:] - r[:-1]
    return SignalSequence(s.subject_id, s.session_id, ht, ft, pp, rr)


def typing_rate(s: SessionEvents) -> float:
    """Characters per minute over the first-to-last press span."""
    if len(s) < 2:
        raise SignalError("typing rate is undefined for fewer than 2 events")
    duration = float(s.press[-1] - s.press[0])
    if duration <= 0:
        return float("inf")
    return len(s) / (duration / 60.0)


def clean_fixed_text(seq: SignalSequence, src: SessionEvents, cfg: CleaningConfig) -> SignalSequence | None:
    """Fixed-text cleaning; returns None when the session is rejected.

    Sessions typed slower than ``cfg.min_typing_rate`` are rejected. Steps with
    ft above ``cfg.ft_outlier_cap`` are removed from all four channels.
    """
    if cfg.task_kind is not TaskKind.FIXED_TEXT:
        raise SignalError("clean_fixed_text requires a fixed_text configuration")
    if typing_rate(src) < cfg.min_typing_rate:
        return None
    keep = seq.ft <= cfg.ft_outlier_cap
    if keep.all():
        return seq
    if not keep.any():
        return None
    return seq.take(keep)


def clean_free_text(seq: SignalSequence) -> SignalSequence:
    return seq


def segment_sessions(s: SessionEvents, gap: float) -> list[SessionEvents]:
    """Split wherever consecutive presses are more than ``gap`` seconds apart.

    Segments are renamed ``<session_id>_<k>`` with a 0-based index k. A session
    with no qualifying gap comes back unchanged (same id).
    """
    cuts = np.flatnonzero(np.diff(s.press) > gap) + 1
    if cuts.size == 0:
        return [s]
    bounds = [0, *cuts.tolist(), len(s)]
    return [
        s.with_session_id(f"{s.session_id}_{k}", slice(a, b))
        for k, (a, b) in enumerate(zip(bounds[:-1], bounds[1:]))
    ]


def preprocess_cohort(
    cohort: Cohort,
    cfg: CleaningConfig,
    segment: bool = False,
) -> tuple[Cohort, ValidationReport]:
    """Events cohort -> signals cohort under the cleaning rules of ``cfg``.

    Rejected sessions are counted per reason; subjects left with no session are
    dropped and listed in the report.
    """
    report = ValidationReport()
    subjects = []
    for subj in cohort.subjects:
        kept = []
        for sess in subj.sessions:
            parts = segment_sessions(sess, cfg.session_gap) if segment else [sess]
            for part in parts:
                report.total_sessions += 1
                if len(part) < 2:
                    report.reject_session(subj.subject_id, part.session_id, TOO_SHORT)
                    continue
                seq = derive_signals(part)
                if cfg.task_kind is TaskKind.FIXED_TEXT:
                    if typing_rate(part) < cfg.min_typing_rate:
                        report.reject_session(subj.subject_id, part.session_id, LOW_TYPING_RATE)
                        continue
                    cleaned = clean_fixed_text(seq, part, cfg)
                    if cleaned is None:
                        report.reject_session(subj.subject_id, part.session_id, EMPTY)
                        continue
                    seq = cleaned
                else:
                    seq = clean_free_text(seq)
                report.accepted_sessions += 1
                kept.append(seq)
        if kept:
            subjects.append(Subject(subj.subject_id, subj.label, tuple(kept)))
    return Cohort(tuple(subjects), report), report
