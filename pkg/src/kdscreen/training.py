"""Epoch loop with patient-level early stopping, checkpoint selection and fine-tuning."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .balance import SubsetSpec
from .checkpoint import Checkpoint
from .evaluation import UndefinedMetricError, aggregate_patient, auc_roc
from .nn.losses import bce_with_logits, focal_loss
from .nn.models import Classifier
from .nn.optim import Adam
from .nn.tensor import _sigmoid, no_grad
from .windowing import ChannelStats, LeakageError, WindowingConfig, WindowSet

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class Loss(str, Enum):
    BCE = "bce"
    FOCAL = "focal"


class CheckpointStrategy(str, Enum):
    LAST_EPOCH = "last_epoch"
    BEST_VALIDATION = "best_validation"


class FreezePolicy(str, Enum):
    FULL = "full"
    HEAD_ONLY = "head_only"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    patience: int | None = 5  # None: run every epoch
    loss: Loss = Loss.FOCAL
    lr: float = 1e-3
    batch_size: int = 32
    checkpoint_strategy: CheckpointStrategy = CheckpointStrategy.BEST_VALIDATION
    seed: int = 0
    focal_gamma: float = 2.0
    focal_alpha: float | None = None  # None: minority prevalence of the member, clamped
    aggregation: str = "hierarchical"
    eval_batch_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "loss", Loss(self.loss))
        object.__setattr__(self, "checkpoint_strategy", CheckpointStrategy(self.checkpoint_strategy))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be None or >= 1")

    def to_dict(self):
        d = asdict(self)
        d["loss"] = self.loss.value
        d["checkpoint_strategy"] = self.checkpoint_strategy.value
        return d


@dataclass
class EpochRecord:
    epoch: int  # 1-based
    train_loss: float
    val_auc: float
    val_loss: float
    checkpoint: str = ""  # "best" when this epoch became the best-validation snapshot


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    selected_epoch: int | None = None
    stopped_early: bool = False

    def __len__(self):
        return len(self.epochs)

    @property
    def val_aucs(self) -> list[float]:
        return [e.val_auc for e in self.epochs]

    def to_csv(self) -> bytes:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_auc", "val_loss", "checkpoint"])
        for e in self.epochs:
            w.writerow([e.epoch, repr(float(e.train_loss)), repr(float(e.val_auc)), repr(float(e.val_loss)), e.checkpoint])
        return buf.getvalue().encode()

    @classmethod
    def from_csv(cls, data: bytes) -> "TrainHistory":
        rows = list(csv.DictReader(io.StringIO(data.decode())))
        h = cls([EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_auc"]),
                             float(r["val_loss"]), r["checkpoint"]) for r in rows])
        best = [e.epoch for e in h.epochs if e.checkpoint == "best"]
        h.best_epoch = best[-1] if best else None
        return h


def _key(auc: float) -> float:
    return -math.inf if math.isnan(auc) else auc


def early_stop_check(history: Sequence[float] | TrainHistory, patience: int | None) -> bool:
    """True to keep training.

    Stops (False) exactly when none of the last ``patience`` validation AUCs is
    strictly above the best AUC seen before them.
    """
    aucs = history.val_aucs if isinstance(history, TrainHistory) else list(history)
    if not aucs:
        raise ValueError("history is empty")
    if patience is None or len(aucs) <= patience:
        return True
    best_prior = max(_key(a) for a in aucs[:-patience])
    return any(_key(a) > best_prior for a in aucs[-patience:])


def focal_alpha_for(member_labels: Sequence[int]) -> float:
    """Minority prevalence of the member's subjects, clamped to [0.1, 0.9]."""
    y = np.asarray(member_labels)
    p = float(np.mean(y == 1))
    return float(np.clip(min(p, 1.0 - p), 0.1, 0.9))


def make_loss(cfg: TrainConfig, alpha: float | None):
    if cfg.loss is Loss.BCE:
        return bce_with_logits
    a = cfg.focal_alpha if cfg.focal_alpha is not None else (alpha if alpha is not None else 0.5)
    return lambda z, y: focal_loss(z, y, cfg.focal_gamma, a)


def evaluate(model: Classifier, data: WindowSet, loss_fn, cfg: TrainConfig):
    """(patient AUC, window loss, patient scores) on ``data``."""
    logits = model.predict_logits(data.X, cfg.eval_batch_size)
    probs = _sigmoid(logits)
    with no_grad():
        loss = float(loss_fn(logits, data.y).data) if len(data) else math.nan
    scores = aggregate_patient(probs, data.subjects, data.sessions, data.labels, cfg.aggregation)
    try:
        auc = auc_roc(scores)
    except UndefinedMetricError:
        auc = math.nan
    return auc, loss, scores


def audit_split(train: WindowSet, val: WindowSet, stats: ChannelStats | None = None) -> None:
    tr, va = set(train.subjects.tolist()), set(val.subjects.tolist())
    if tr & va:
        raise LeakageError(f"subjects in both train and validation: {sorted(tr & va)[:5]}")
    if stats is not None:
        stats.check_disjoint(va)


def train(
    model: Classifier,
    train_set: WindowSet,
    val_set: WindowSet,
    cfg: TrainConfig,
    stats: ChannelStats,
    windowing: WindowingConfig,
    member: SubsetSpec | None = None,
) -> tuple[TrainHistory, Checkpoint]:
    """Train ``model`` in place and return its history and selected checkpoint.

    ``train_set``/``val_set`` are already standardized with ``stats``. When a
    member is given only its subjects' windows are used for updates.
    """
    if member is not None:
        outside = set(member.subject_ids) - set(train_set.labels)
        if outside:
            raise LeakageError(f"member includes non-training subjects {sorted(outside)[:5]}")
        train_set = train_set.select(member.subject_ids)
    if len(train_set) == 0:
        raise TrainingError("empty training split")
    if len(val_set) == 0:
        raise TrainingError("empty validation split")
    audit_split(train_set, val_set, stats)

    member_labels = [train_set.labels[s] for s in sorted(set(train_set.subjects.tolist()))]
    alpha = focal_alpha_for(member_labels)
    loss_fn = make_loss(cfg, alpha)
    opt = Adam(model.parameters, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    history = TrainHistory()
    best_auc = -math.inf
    best_ckpt = None
    n = len(train_set)
    if cfg.focal_alpha is not None:
        alpha = cfg.focal_alpha
    meta = {"lr": cfg.lr, "loss": cfg.loss.value, "focal_alpha": alpha if cfg.loss is Loss.FOCAL else None}

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            opt.zero_grad()
            loss = loss_fn(model(train_set.X[idx]), train_set.y[idx])
            loss.backward()
            opt.step()
            total += float(loss.data) * idx.size
        val_auc, val_loss, _ = evaluate(model, val_set, loss_fn, cfg)
        rec = EpochRecord(epoch, total / n, float(val_auc), float(val_loss))
        if _key(val_auc) > best_auc or best_ckpt is None:
            if _key(val_auc) > best_auc:
                best_auc = _key(val_auc)
                history.best_epoch = epoch
                rec.checkpoint = "best"
            best_ckpt = Checkpoint.capture(model, stats, windowing, epoch, opt.state, **meta, val_auc=val_auc)
        history.epochs.append(rec)
        if not early_stop_check(history, cfg.patience):
            history.stopped_early = epoch < cfg.epochs
            break

    if cfg.checkpoint_strategy is CheckpointStrategy.BEST_VALIDATION:
        ckpt = best_ckpt
        model.parameters.load(ckpt.params)
    else:
        ckpt = Checkpoint.capture(model, stats, windowing, history.epochs[-1].epoch, opt.state,
                                  **meta, val_auc=history.epochs[-1].val_auc)
    history.selected_epoch = ckpt.epoch
    return history, ckpt


def fine_tune(
    checkpoint: Checkpoint,
    train_set: WindowSet,
    val_set: WindowSet,
    policy: FreezePolicy,
    cfg: TrainConfig,
    stats: ChannelStats,
    lr: float | None = None,
    member: SubsetSpec | None = None,
) -> tuple[TrainHistory, Checkpoint, Classifier]:
    """Continue training from ``checkpoint`` on target windows.

    The learning rate defaults to a tenth of the checkpoint's training rate.
    ``head_only`` freezes every parameter except the final affine head.
    """
    W = checkpoint.windowing.window_size
    for name, data in (("train", train_set), ("val", val_set)):
        if len(data) and data.X.shape[1] != W:
            raise TrainingError(f"{name} windows have length {data.X.shape[1]}, checkpoint expects {W}")
    policy = FreezePolicy(policy)
    if lr is None:
        lr = fine_tune_lr(checkpoint)
    model = checkpoint.build()
    if policy is FreezePolicy.HEAD_ONLY:
        model.parameters.freeze_backbone()
    history, ckpt = train(model, train_set, val_set, replace(cfg, lr=lr), stats,
                          checkpoint.windowing, member)
    ckpt.meta["freeze_policy"] = policy.value
    return history, ckpt, model


def fine_tune_lr(checkpoint: Checkpoint) -> float:
    src = checkpoint.meta.get("lr")
    if src is None:
        raise TrainingError("checkpoint does not record its training learning rate")
    return float(src) / 10.0
