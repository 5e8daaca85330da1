"""Forward-selection hyperparameter search: one axis at a time, in declared order."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

log = logging.getLogger(__name__)

AXES = ("window_size", "stride", "batch_size", "lr")
# stride candidates are fractions of the selected window size; 1 is a literal step
STRIDE_ONE, STRIDE_HALF, STRIDE_FULL = "1", "half", "full"


class SearchError(RuntimeError):
    pass


class DatasetClass(str, Enum):
    FREE_TEXT_LONG = "free_text_long"
    FIXED_TEXT_SHORT = "fixed_text_short"


@dataclass(frozen=True)
class SearchSpace:
    window_size: tuple[int, ...]
    stride: tuple[str, ...] = (STRIDE_ONE, STRIDE_HALF, STRIDE_FULL)
    batch_size: tuple[int, ...] = (8, 16, 32)
    lr: tuple[float, ...] = (1e-3, 1e-4, 1e-5)

    def __post_init__(self):
        for axis in AXES:
            if not getattr(self, axis):
                raise ValueError(f"axis {axis!r} is empty")

    def candidates(self, axis: str, chosen: dict) -> list:
        if axis == "stride":
            return resolve_strides(self.stride, chosen["window_size"])
        return list(getattr(self, axis))

    def to_dict(self):
        return {a: list(getattr(self, a)) for a in AXES}

    @classmethod
    def from_dict(cls, d):
        return cls(**{a: tuple(d[a]) for a in AXES if a in d})


def resolve_strides(spec: Sequence, window_size: int) -> list[int]:
    """Map stride specs ("1", "half", "full" or ints) to step counts for ``window_size``."""
    out = []
    for s in spec:
        if s in (STRIDE_ONE, 1):
            v = 1
        elif s == STRIDE_HALF:
            v = max(1, window_size // 2)
        elif s == STRIDE_FULL:
            v = window_size
        else:
            v = int(s)
        out.append(v)
    return out


def default_space(dataset_class) -> SearchSpace:
    dc = DatasetClass(dataset_class)
    ws = (90, 100, 110) if dc is DatasetClass.FREE_TEXT_LONG else (40, 50, 60)
    return SearchSpace(window_size=ws)


@dataclass
class AxisStep:
    axis: str
    candidates: list
    scores: list  # float, or None for a failed candidate
    chosen: object


@dataclass
class SearchTrace:
    steps: list[AxisStep] = field(default_factory=list)
    calls: int = 0

    def chosen(self) -> dict:
        return {s.axis: s.chosen for s in self.steps}

    def to_csv(self, arch: str = "", balancing: str = "") -> bytes:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arch", "balancing", "axis", "candidate", "mean_val_auc", "chosen"])
        for s in self.steps:
            for c, sc in zip(s.candidates, s.scores):
                w.writerow([arch, balancing, s.axis, c, "failed" if sc is None else repr(sc),
                            int(c == s.chosen)])
        return buf.getvalue().encode()

    def summary_row(self) -> dict:
        """WS/ST/LR/BS of the selected configuration."""
        c = self.chosen()
        return {"WS": c.get("window_size"), "ST": c.get("stride"),
                "LR": c.get("lr"), "BS": c.get("batch_size")}


def forward_select(
    space: SearchSpace,
    evaluator: Callable[[dict], float],
    axes: Sequence[str] = AXES,
    initial: dict | None = None,
) -> tuple[dict, SearchTrace]:
    """Optimize ``axes`` in order, each with the earlier winners fixed.

    Axes not yet optimized take their first declared value while an earlier
    axis is searched. A candidate whose evaluation raises (or returns NaN) is
    recorded as failed and cannot win; ties go to the earliest candidate.
    """
    chosen = dict(initial or {})
    for axis in AXES:
        chosen.setdefault(axis, space.candidates(axis, chosen)[0])
    trace = SearchTrace()
    for axis in axes:
        cands = space.candidates(axis, chosen)
        scores = []
        for c in cands:
            cfg = _with(space, chosen, axis, c)
            trace.calls += 1
            try:
                score = float(evaluator(cfg))
                if math.isnan(score):
                    raise SearchError("evaluator returned NaN")
            except Exception as exc:  # noqa: BLE001 - a failed candidate is recorded, not fatal
                log.warning("candidate %s=%r failed: %s", axis, c, exc)
                score = None
            scores.append(score)
        valid = [(sc, i) for i, sc in enumerate(scores) if sc is not None]
        if not valid:
            raise SearchError(f"every candidate of axis {axis!r} failed")
        best = max(valid, key=lambda t: (t[0], -t[1]))[1]
        chosen = _with(space, chosen, axis, cands[best])
        trace.steps.append(AxisStep(axis, list(cands), scores, cands[best]))
    return chosen, trace


def _with(space: SearchSpace, chosen: dict, axis: str, value) -> dict:
    cfg = dict(chosen)
    cfg[axis] = value
    if axis == "window_size":
        # a stride not searched yet follows the window it is paired with
        cfg["stride"] = space.candidates("stride", cfg)[0]
    return cfg
