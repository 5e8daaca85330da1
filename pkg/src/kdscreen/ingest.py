"""Parsing and validation of keystroke logs.

Two canonical CSV schemas are accepted:

* event logs   ``subject_id,session_id,key_id,press_ts,release_ts``
* signal logs  ``subject_id,session_id,step,ht,ft,pp,rr`` (``rr`` may be empty)

Labels travel separately as ``subject_id,label`` with label 1 = PD, 0 = HC.
All timestamps and intervals are seconds.
"""
from __future__ import annotations

import csv
import io
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping, NamedTuple, Sequence, Union

import numpy as np

EVENT_HEADER = ("subject_id", "session_id", "key_id", "press_ts", "release_ts")
SIGNAL_HEADER = ("subject_id", "session_id", "step", "ht", "ft", "pp", "rr")
LABEL_HEADER = ("subject_id", "label")

# rejection reason codes
UNSORTED = "unsorted"
NEGATIVE_HOLD = "negative hold"
EMPTY = "empty"
DUPLICATE_ID = "duplicate id"
RAGGED = "ragged channels"
INVALID_TIMESTAMP = "invalid timestamp"
MISSING_LABEL = "missing label"
INVALID_LABEL = "invalid label"
TOO_SHORT = "too short"
LOW_TYPING_RATE = "low typing rate"

Source = Union[bytes, str, os.PathLike, IO[bytes], IO[str]]  # str is CSV text, not a path


class IngestError(ValueError):
    """Schema-level failure of an input file (missing column, unparsable value)."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TaskKind(str, Enum):
    FIXED_TEXT = "fixed_text"
    FREE_TEXT = "free_text"


class KeyEvent(NamedTuple):
    key_id: str
    press_ts: float
    release_ts: float


@dataclass(frozen=True, eq=False)
class SessionEvents:
    """One typing session as parallel press/release arrays."""

    subject_id: str
    session_id: str
    task_kind: TaskKind
    key_ids: tuple[str, ...]
    press: np.ndarray
    release: np.ndarray

    def __post_init__(self):
        press = np.asarray(self.press, dtype=np.float64)
        release = np.asarray(self.release, dtype=np.float64)
        if press.shape != release.shape or press.ndim != 1 or len(self.key_ids) != press.size:
            raise ValueError("press, release and key_ids must be 1-D and equal length")
        press.flags.writeable = False
        release.flags.writeable = False
        object.__setattr__(self, "press", press)
        object.__setattr__(self, "release", release)
        object.__setattr__(self, "task_kind", TaskKind(self.task_kind))

    @classmethod
    def from_events(cls, subject_id, session_id, task_kind, events: Iterable[KeyEvent]):
        events = list(events)
        return cls(
            subject_id,
            session_id,
            task_kind,
            tuple(e.key_id for e in events),
            np.array([e.press_ts for e in events], dtype=np.float64),
            np.array([e.release_ts for e in events], dtype=np.float64),
        )

    @property
    def events(self) -> list[KeyEvent]:
        return [KeyEvent(k, float(p), float(r)) for k, p, r in zip(self.key_ids, self.press, self.release)]

    def __len__(self) -> int:
        return self.press.size

    def __eq__(self, other):
        if not isinstance(other, SessionEvents):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.session_id == other.session_id
            and self.task_kind == other.task_kind
            and self.key_ids == other.key_ids
            and np.array_equal(self.press, other.press)
            and np.array_equal(self.release, other.release)
        )

    def with_session_id(self, session_id: str, sl: slice | None = None) -> "SessionEvents":
        sl = sl if sl is not None else slice(None)
        return SessionEvents(
            self.subject_id, session_id, self.task_kind,
            self.key_ids[sl], self.press[sl], self.release[sl],
        )


CHANNELS = ("ht", "ft", "pp", "rr")


@dataclass(frozen=True, eq=False)
class SignalSequence:
    """Four aligned channels (ht, ft, pp, rr) for one session, seconds."""

    subject_id: str
    session_id: str
    ht: np.ndarray
    ft: np.ndarray
    pp: np.ndarray
    rr: np.ndarray

    def __post_init__(self):
        arrays = []
        for name in CHANNELS:
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.ndim != 1:
                raise ValueError(f"channel {name} must be 1-D")
            a.flags.writeable = False
            object.__setattr__(self, name, a)
            arrays.append(a)
        if len({a.size for a in arrays}) != 1:
            raise ValueError("ragged channels")

    def __len__(self) -> int:
        return self.ht.size

    @property
    def length(self) -> int:
        return self.ht.size

    def matrix(self) -> np.ndarray:
        """(L, 4) array in channel order ht, ft, pp, rr."""
        return np.stack([self.ht, self.ft, self.pp, self.rr], axis=1)

    def take(self, mask_or_index) -> "SignalSequence":
        return SignalSequence(
            self.subject_id, self.session_id,
            self.ht[mask_or_index], self.ft[mask_or_index],
            self.pp[mask_or_index], self.rr[mask_or_index],
        )

    def __eq__(self, other):
        if not isinstance(other, SignalSequence):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.session_id == other.session_id
            and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in CHANNELS)
        )


Session = Union[SessionEvents, SignalSequence]


@dataclass(frozen=True)
class Subject:
    subject_id: str
    label: int
    sessions: tuple[Session, ...]


@dataclass
class ValidationReport:
    total_sessions: int = 0
    accepted_sessions: int = 0
    rejected_sessions: int = 0
    total_rows: int = 0
    accepted_rows: int = 0
    rejected_rows: int = 0
    reasons: Counter = field(default_factory=Counter)
    # (subject_id, session_id, reason) for rejected sessions
    rejected: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.reasons

    def reject_session(self, subject_id, session_id, reason):
        self.rejected_sessions += 1
        self.reasons[reason] += 1
        self.rejected.append((subject_id, session_id, reason))

    def to_dict(self) -> dict:
        return {
            "total_sessions": self.total_sessions,
            "accepted_sessions": self.accepted_sessions,
            "rejected_sessions": self.rejected_sessions,
            "total_rows": self.total_rows,
            "accepted_rows": self.accepted_rows,
            "rejected_rows": self.rejected_rows,
            "reasons": dict(sorted(self.reasons.items())),
            "rejected": [list(r) for r in self.rejected],
        }


@dataclass(frozen=True, eq=False)
class Cohort:
    subjects: tuple[Subject, ...]
    report: ValidationReport | None = None

    def __eq__(self, other):
        if not isinstance(other, Cohort):
            return NotImplemented
        return self.subjects == other.subjects

    def __len__(self) -> int:
        return len(self.subjects)

    def __iter__(self) -> Iterator[Subject]:
        return iter(self.subjects)

    @property
    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]

    @property
    def labels(self) -> dict[str, int]:
        return {s.subject_id: s.label for s in self.subjects}

    def label_counts(self) -> dict[int, int]:
        c = Counter(s.label for s in self.subjects)
        return {1: c.get(1, 0), 0: c.get(0, 0)}

    def subset(self, subject_ids: Iterable[str]) -> "Cohort":
        keep = set(subject_ids)
        return Cohort(tuple(s for s in self.subjects if s.subject_id in keep), self.report)

    def sessions(self) -> Iterator[tuple[Subject, Session]]:
        for subj in self.subjects:
            for sess in subj.sessions:
                yield subj, sess


# ---------------------------------------------------------------- reading


def _text_lines(source: Source) -> io.TextIOBase:
    if isinstance(source, bytes):
        return io.StringIO(source.decode("utf-8"), newline="")
    if isinstance(source, str):
        return io.StringIO(source, newline="")
    if isinstance(source, os.PathLike):
        return io.StringIO(Path(source).read_text(encoding="utf-8"), newline="")
    data = source.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return io.StringIO(data, newline="")


def _reader(source: Source, required: Sequence[str], optional: Sequence[str] = ()):
    reader = csv.reader(_text_lines(source))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise IngestError("empty input, header expected", line=1) from None
    missing = [c for c in required if c not in header]
    if missing:
        raise IngestError(f"missing column(s): {', '.join(missing)}", line=1)
    idx = {c: header.index(c) for c in list(required) + [c for c in optional if c in header]}
    return reader, idx, len(header)


def _float(value: str, column: str, line: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise IngestError(f"non-numeric value {value!r} in column {column!r}", line=line) from None


def parse_labels(source: Source) -> dict[str, int]:
    """Read a labels CSV into ``{subject_id: label}``."""
    reader, idx, width = _reader(source, LABEL_HEADER)
    labels: dict[str, int] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != width:
            raise IngestError(f"expected {width} fields, got {len(row)}", line=lineno)
        sid = row[idx["subject_id"]]
        raw = row[idx["label"]].strip()
        if raw not in ("0", "1"):
            raise IngestError(f"label must be 0 or 1, got {raw!r}", line=lineno)
        if sid in labels:
            raise IngestError(f"duplicate subject {sid!r} in labels", line=lineno)
        labels[sid] = int(raw)
    return labels


def _resolve_labels(labels) -> Mapping[str, int] | None:
    if labels is None or isinstance(labels, Mapping):
        return labels
    return parse_labels(labels)


def parse_event_log(source: Source, task_kind, labels=None) -> Cohort:
    """Parse an event CSV into a cohort of :class:`SessionEvents`.

    Rows are grouped by (subject_id, session_id) and sorted by press time.
    Rows with release < press, or a negative/non-finite press, are rejected
    individually and counted in ``cohort.report``. Subjects keep the order
    of their first appearance. ``labels`` is a mapping or a labels CSV; when
    omitted every subject gets label 0.
    """
    task_kind = TaskKind(task_kind)
    labels = _resolve_labels(labels)
    reader, idx, width = _reader(source, EVENT_HEADER)
    report = ValidationReport()
    # subject -> session -> list of (press, order, key, release)
    grouped: dict[str, dict[str, list]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != width:
            raise IngestError(f"expected {width} fields, got {len(row)}", line=lineno)
        report.total_rows += 1
        sid, sess = row[idx["subject_id"]], row[idx["session_id"]]
        press = _float(row[idx["press_ts"]], "press_ts", lineno)
        release = _float(row[idx["release_ts"]], "release_ts", lineno)
        sessions = grouped.setdefault(sid, {})
        bucket = sessions.setdefault(sess, [])
        if not (math.isfinite(press) and math.isfinite(release)) or press < 0:
            report.rejected_rows += 1
            report.reasons[INVALID_TIMESTAMP] += 1
            continue
        if release < press:
            report.rejected_rows += 1
            report.reasons[NEGATIVE_HOLD] += 1
            continue
        report.accepted_rows += 1
        bucket.append((press, len(bucket), row[idx["key_id"]], release))

    subjects = []
    for sid, sessions in grouped.items():
        kept = []
        for sess, rows in sessions.items():
            report.total_sessions += 1
            if not rows:
                report.reject_session(sid, sess, EMPTY)
                continue
            rows.sort()
            kept.append(SessionEvents(
                sid, sess, task_kind,
                tuple(r[2] for r in rows),
                np.array([r[0] for r in rows]),
                np.array([r[3] for r in rows]),
            ))
            report.accepted_sessions += 1
        label = _subject_label(sid, labels, report, len(kept))
        if label is None or not kept:
            continue
        subjects.append(Subject(sid, label, tuple(kept)))
    return Cohort(tuple(subjects), report)


def _subject_label(sid, labels, report, n_sessions):
    if labels is None:
        return 0
    if sid not in labels:
        # sessions already counted as accepted are moved to rejected
        report.accepted_sessions -= n_sessions
        for _ in range(n_sessions):
            report.reject_session(sid, "*", MISSING_LABEL)
        return None
    return int(labels[sid])


def parse_signal_log(source: Source, labels=None) -> Cohort:
    """Parse a signal CSV into a cohort of :class:`SignalSequence`.

    A session whose ``rr`` column is empty on every row gets ``rr = ht + ft``.
    Sessions with any missing channel value (ragged channels) are rejected
    as a whole.
    """
    labels = _resolve_labels(labels)
    reader, idx, width = _reader(source, SIGNAL_HEADER[:6], optional=("rr",))
    has_rr = "rr" in idx
    report = ValidationReport()
    grouped: dict[str, dict[str, list]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != width:
            raise IngestError(f"expected {width} fields, got {len(row)}", line=lineno)
        report.total_rows += 1
        sid, sess = row[idx["subject_id"]], row[idx["session_id"]]
        try:
            step = int(row[idx["step"]])
        except ValueError:
            raise IngestError(f"non-integer step {row[idx['step']]!r}", line=lineno) from None
        vals = []
        for c in CHANNELS:
            raw = row[idx[c]].strip() if c in idx else ""
            vals.append(None if raw == "" else _float(raw, c, lineno))
        grouped.setdefault(sid, {}).setdefault(sess, []).append((step, vals))

    subjects = []
    for sid, sessions in grouped.items():
        kept = []
        for sess, rows in sessions.items():
            report.total_sessions += 1
            rows.sort(key=lambda r: r[0])
            cols = list(zip(*(r[1] for r in rows)))
            ht, ft, pp, rr = cols
            base_missing = [any(v is None for v in c) for c in (ht, ft, pp)]
            rr_missing = [v is None for v in rr]
            if any(base_missing):
                report.reject_session(sid, sess, RAGGED)
                report.rejected_rows += len(rows)
                continue
            if all(rr_missing) or not has_rr:
                rr = np.asarray(ht, dtype=np.float64) + np.asarray(ft, dtype=np.float64)
            elif any(rr_missing):
                report.reject_session(sid, sess, RAGGED)
                report.rejected_rows += len(rows)
                continue
            kept.append(SignalSequence(sid, sess, ht, ft, pp, rr))
            report.accepted_sessions += 1
            report.accepted_rows += len(rows)
        label = _subject_label(sid, labels, report, len(kept))
        if label is None or not kept:
            continue
        subjects.append(Subject(sid, label, tuple(kept)))
    return Cohort(tuple(subjects), report)


def parse_signal_channels(sid, sess, ht, ft, pp, rr=None) -> SignalSequence:
    """Build a sequence from channel lists; ragged input raises ``IngestError``."""
    if rr is None:
        if len(ht) != len(ft):
            raise IngestError(f"{RAGGED} in session {sess!r}")
        rr = np.asarray(ht, dtype=np.float64) + np.asarray(ft, dtype=np.float64)
    if len({len(ht), len(ft), len(pp), len(rr)}) != 1:
        raise IngestError(f"{RAGGED} in session {sess!r}")
    return SignalSequence(sid, sess, ht, ft, pp, rr)


# ---------------------------------------------------------------- validation


def validate_cohort(cohort: Cohort) -> ValidationReport:
    """Audit every invariant of ``cohort`` without modifying it."""
    report = ValidationReport()
    seen: set[str] = set()
    for subj in cohort.subjects:
        dup = subj.subject_id in seen
        seen.add(subj.subject_id)
        if dup:
            report.reasons[DUPLICATE_ID] += 1
        if subj.label not in (0, 1):
            report.reasons[INVALID_LABEL] += 1
        sess_seen: set[str] = set()
        for sess in subj.sessions:
            report.total_sessions += 1
            reason = _session_breach(subj, sess)
            if reason is None and sess.session_id in sess_seen:
                reason = DUPLICATE_ID
            sess_seen.add(sess.session_id)
            if reason is None:
                report.accepted_sessions += 1
            else:
                report.reject_session(subj.subject_id, sess.session_id, reason)
    return report


def _session_breach(subj: Subject, sess: Session) -> str | None:
    if sess.subject_id != subj.subject_id:
        return DUPLICATE_ID
    if isinstance(sess, SessionEvents):
        if len(sess) == 0:
            return EMPTY
        if not (np.all(np.isfinite(sess.press)) and np.all(sess.press >= 0)):
            return INVALID_TIMESTAMP
        if np.any(sess.release < sess.press):
            return NEGATIVE_HOLD
        if np.any(np.diff(sess.press) < 0):
            return UNSORTED
        return None
    if len(sess) == 0:
        return EMPTY
    if not all(np.all(np.isfinite(getattr(sess, c))) for c in CHANNELS):
        return INVALID_TIMESTAMP
    if np.any(sess.ht < 0):
        return NEGATIVE_HOLD
    return None


# ---------------------------------------------------------------- writing


def _fmt(x: float) -> str:
    return repr(float(x))


def write_event_log(cohort: Cohort) -> bytes:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVENT_HEADER)
    for subj, sess in cohort.sessions():
        for k, p, r in zip(sess.key_ids, sess.press, sess.release):
            w.writerow((subj.subject_id, sess.session_id, k, _fmt(p), _fmt(r)))
    return buf.getvalue().encode("utf-8")


def write_signal_log(cohort: Cohort) -> bytes:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SIGNAL_HEADER)
    for subj, seq in cohort.sessions():
        for i in range(len(seq)):
            w.writerow((subj.subject_id, seq.session_id, i,
                        _fmt(seq.ht[i]), _fmt(seq.ft[i]), _fmt(seq.pp[i]), _fmt(seq.rr[i])))
    return buf.getvalue().encode("utf-8")


def write_labels(labels: Mapping[str, int] | Cohort) -> bytes:
    if isinstance(labels, Cohort):
        labels = labels.labels
    lines = ["subject_id,label"] + [f"{sid},{int(y)}" for sid, y in labels.items()]
    return ("\n".join(lines) + "\n").encode("utf-8")
