"""Subject-level class balancing: undersampling and the IMBALMED ensemble ladder."""
from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_FRACTIONS = (0.20, 0.35, 0.50, 0.65, 0.80)


class BalanceError(ValueError):
    pass


class Strategy(str, Enum):
    UNBALANCED = "unbalanced"
    UNDERSAMPLE = "undersample"
    IMBALMED = "imbalmed"


@dataclass(frozen=True)
class SubsetSpec:
    subject_ids: tuple[str, ...]
    target_minority_fraction: float
    achieved_minority_fraction: float
    minority_label: int
    capped: bool = False

    def __len__(self):
        return len(self.subject_ids)

    def to_dict(self):
        return {
            "subject_ids": list(self.subject_ids),
            "target_minority_fraction": self.target_minority_fraction,
            "achieved_minority_fraction": self.achieved_minority_fraction,
            "minority_label": self.minority_label,
            "capped": self.capped,
        }


@dataclass(frozen=True)
class ResamplingPlan:
    strategy: Strategy
    members: tuple[SubsetSpec, ...]
    seed: int

    def __post_init__(self):
        if not self.members:
            raise BalanceError("a plan needs at least one member")
        if self.strategy is not Strategy.IMBALMED and len(self.members) != 1:
            raise BalanceError(f"{self.strategy.value} plans have exactly one member")

    def subjects(self) -> set[str]:
        return set().union(*(m.subject_ids for m in self.members))

    def check_excludes(self, held_out: Iterable[str]) -> None:
        overlap = self.subjects().intersection(held_out)
        if overlap:
            raise BalanceError(f"plan includes held-out subjects {sorted(overlap)[:5]}")

    def to_dict(self):
        return {
            "strategy": self.strategy.value,
            "seed": self.seed,
            "members": [m.to_dict() for m in self.members],
        }


def _split_classes(train_labels: Mapping[str, int]):
    pos = [s for s, y in train_labels.items() if y == 1]
    neg = [s for s, y in train_labels.items() if y == 0]
    if not pos or not neg:
        raise BalanceError("both classes must be present in the training subjects")
    # ties: PD counts as the minority
    if len(pos) <= len(neg):
        return 1, pos, neg
    return 0, neg, pos


def _round_half_up(x) -> int:
    return int(math.floor(x + Fraction(1, 2)))


def majority_count(m: int, f: float) -> int:
    """round-half-up(m (1 - f) / f), evaluated exactly on the decimal value of f."""
    fr = Fraction(repr(float(f)))
    return _round_half_up(m * (1 - fr) / fr)


def _member(minority, majority_pool, n_major, rng, target, minority_label, order):
    n_avail = len(majority_pool)
    capped = n_major > n_avail
    n_major = min(n_major, n_avail)
    picked = rng.choice(n_avail, size=n_major, replace=False) if n_major else np.array([], int)
    chosen = set(minority) | {majority_pool[i] for i in picked}
    # keep the caller's subject order so plans serialize deterministically
    ids = tuple(s for s in order if s in chosen)
    achieved = len(minority) / len(ids)
    return SubsetSpec(ids, target, achieved, minority_label, capped)


def unbalanced(train_labels: Mapping[str, int], seed: int = 0) -> ResamplingPlan:
    minority_label, minority, _ = _split_classes(train_labels)
    ids = tuple(train_labels)
    frac = len(minority) / len(ids)
    return ResamplingPlan(Strategy.UNBALANCED, (SubsetSpec(ids, frac, frac, minority_label),), seed)


def undersample(train_labels: Mapping[str, int], seed: int) -> ResamplingPlan:
    """Keep every minority subject; draw as many majority subjects without replacement."""
    minority_label, minority, majority = _split_classes(train_labels)
    rng = np.random.default_rng([seed, 0])
    m = _member(minority, majority, len(minority), rng, 0.5, minority_label, list(train_labels))
    return ResamplingPlan(Strategy.UNDERSAMPLE, (m,), seed)


def imbalmed_plan(
    train_labels: Mapping[str, int],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> ResamplingPlan:
    """One member per target minority fraction.

    Every member keeps all minority subjects (m of them) and draws
    ``round(m * (1 - f) / f)`` majority subjects, capped at what is available.
    Member k uses its own generator seeded by ``(seed, k)``.
    """
    fractions = list(fractions)
    if not fractions:
        raise BalanceError("fractions must be non-empty")
    if any(not 0 < f < 1 for f in fractions):
        raise BalanceError("fractions must lie in (0, 1)")
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise BalanceError("fractions must be strictly increasing")
    minority_label, minority, majority = _split_classes(train_labels)
    m = len(minority)
    order = list(train_labels)
    members = []
    for k, f in enumerate(fractions):
        rng = np.random.default_rng([seed, k])
        n_major = majority_count(m, f)
        members.append(_member(minority, majority, n_major, rng, f, minority_label, order))
    return ResamplingPlan(Strategy.IMBALMED, tuple(members), seed)


def make_plan(strategy, train_labels: Mapping[str, int], seed: int, fractions=DEFAULT_FRACTIONS) -> ResamplingPlan:
    strategy = Strategy(strategy)
    if strategy is Strategy.UNBALANCED:
        return unbalanced(train_labels, seed)
    if strategy is Strategy.UNDERSAMPLE:
        return undersample(train_labels, seed)
    return imbalmed_plan(train_labels, fractions, seed)


def ensemble_aggregate(member_patient_probs: Sequence[Mapping[str, float]]) -> dict[str, float]:
    """Unweighted per-subject mean of member probabilities."""
    if not member_patient_probs:
        raise BalanceError("no members to aggregate")
    keys = set(member_patient_probs[0])
    for probs in member_patient_probs[1:]:
        if set(probs) != keys:
            raise BalanceError("ensemble members cover different subject sets")
    n = len(member_patient_probs)
    # fsum keeps the mean independent of member order
    return {
        sid: math.fsum(p[sid] for p in member_patient_probs) / n
        for sid in member_patient_probs[0]
    }
