"""Subject-grouped stratified folds, patient-level aggregation, AUC-ROC and F1."""
from __future__ import annotations

import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple[tuple[str, ...], ...]  # validation subjects per fold
    seed: int
    stratified: bool = True

    def train_subjects(self, fold: int, all_subjects: Sequence[str]) -> list[str]:
        held = set(self.folds[fold])
        return [s for s in all_subjects if s not in held]

    def to_dict(self):
        return {"k": self.k, "seed": self.seed, "stratified": self.stratified,
                "folds": [list(f) for f in self.folds]}


@dataclass(frozen=True)
class PatientScore:
    subject_id: str
    prob: float
    label: int


def make_folds(labels: Mapping[str, int], k: int = 10, seed: int = 0) -> FoldPlan:
    """Stratified partition of subjects into ``k`` validation folds.

    Each class is shuffled and the classes are dealt round-robin one after
    the other with a continuing fold pointer, so fold sizes differ by at most
    one and every fold gets floor or ceil of its share of each class.
    """
    subjects = list(labels)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(subjects):
        raise ValueError(f"k={k} exceeds the number of subjects ({len(subjects)})")
    rng = np.random.default_rng(seed)
    by_class = {c: [s for s in subjects if labels[s] == c] for c in (1, 0)}
    stratified = all(len(v) >= k for v in by_class.values())
    if not stratified:
        warnings.warn(
            f"a class has fewer than k={k} subjects; stratification is best-effort",
            stacklevel=2,
        )
    folds: list[list[str]] = [[] for _ in range(k)]
    pos = 0
    for c in (1, 0):
        members = by_class[c]
        for i in rng.permutation(len(members)):
            folds[pos % k].append(members[i])
            pos += 1
    return FoldPlan(k, tuple(tuple(f) for f in folds), seed, stratified)


def aggregate_patient(
    probs: Sequence[float],
    subjects: Sequence[str],
    sessions: Sequence[str],
    labels: Mapping[str, int],
    mode: str = "hierarchical",
) -> list[PatientScore]:
    """Collapse window probabilities to one score per subject.

    ``hierarchical`` averages windows within each session, then sessions within
    each subject; ``flat`` averages all of a subject's windows at once. Subjects
    come out in order of first appearance.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size and (np.any(probs < 0) or np.any(probs > 1) or not np.all(np.isfinite(probs))):
        raise ValueError("window probabilities must be finite and within [0, 1]")
    per: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for p, s, ss in zip(probs.tolist(), subjects, sessions):
        per[s][ss].append(p)
    out = []
    for s, sess in per.items():
        if mode == "hierarchical":
            means = [math.fsum(v) / len(v) for v in sess.values()]
            score = math.fsum(means) / len(means)
        elif mode == "flat":
            allp = [p for v in sess.values() for p in v]
            score = math.fsum(allp) / len(allp)
        else:
            raise ValueError(f"unknown aggregation mode {mode!r}")
        out.append(PatientScore(s, score, int(labels[s])))
    return out


def missing_subjects(scores: Sequence[PatientScore], expected: Sequence[str]) -> list[str]:
    covered = {p.subject_id for p in scores}
    missing = [s for s in expected if s not in covered]
    if missing:
        log.warning("%d subject(s) have no windows and are excluded from metrics", len(missing))
    return missing


def auc_roc(scores: Sequence[PatientScore]) -> float:
    """Mann-Whitney AUC: P(score_PD > score_HC) with ties counted as one half.

    Computed from midranks, O(n log n).
    """
    s = np.array([p.prob for p in scores], dtype=np.float64)
    y = np.array([p.label for p in scores], dtype=np.int64)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC-ROC needs both classes")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    # midranks over tie groups (1-based)
    i = 0
    n = s.size
    while i < n:
        j = i
        while j + 1 < n and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    # rank sums of half-integers times 2 are integers: exact in float64
    u2 = 2.0 * ranks[y == 1].sum() - n_pos * (n_pos + 1)
    return float(u2 / (2.0 * n_pos * n_neg))


def f1(scores: Sequence[PatientScore], threshold: float = 0.5) -> float:
    """F1 with PD as the positive class; predictions are ``prob >= threshold``."""
    tp = fp = fn = 0
    for p in scores:
        pred = p.prob >= threshold
        if pred and p.label == 1:
            tp += 1
        elif pred:
            fp += 1
        elif p.label == 1:
            fn += 1
    return f1_from_counts(tp, fp, fn)


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        warnings.warn("F1 is undefined (precision + recall = 0); reporting 0", stacklevel=2)
        return 0.0
    return 2 * precision * recall / (precision + recall)


def scores_to_dict(scores: Sequence[PatientScore]) -> dict[str, float]:
    return {p.subject_id: p.prob for p in scores}


def scores_from_dict(probs: Mapping[str, float], labels: Mapping[str, int]) -> list[PatientScore]:
    return [PatientScore(s, float(p), int(labels[s])) for s, p in probs.items()]
