"""Stage drivers: synth, preprocess, pretrain, finetune, external validation.

Every stage writes its outputs under ``cfg.out`` and finishes with a
``record.json`` that lists each artifact with its sha256 digest. A stage that
raises still leaves a record, marked ``failed``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .balance import ResamplingPlan, Strategy, ensemble_aggregate, make_plan
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, Stage
from .evaluation import (FoldPlan, UndefinedMetricError, aggregate_patient, auc_roc, f1,
                         make_folds, missing_subjects, scores_from_dict, scores_to_dict)
from .ingest import (Cohort, IngestError, parse_event_log, parse_labels, parse_signal_log,
                     write_labels, write_signal_log)
from .nn.models import Classifier, ModelSpec
from .search import SearchSpace, SearchTrace, default_space, forward_select
from .signals import CleaningConfig, preprocess_cohort
from .synth import SynthConfig, generate_cohort
from .training import FreezePolicy, TrainConfig, fine_tune, train
from .windowing import LeakageError, WindowingConfig, WindowSet, cohort_windows

log = logging.getLogger(__name__)

METRICS_HEADER = ["stage", "arch", "balancing", "variant", "fold", "auc_roc", "f1", "n_subjects"]
RECORD_VERSION = 1


def derive_seed(*parts: int) -> int:
    """A 32-bit seed that depends on every part; used to give each fold/member its own stream."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _num(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


class RecordWriter:
    """Single writer for a stage's output directory."""

    def __init__(self, out, stage: Stage, config: ExperimentConfig):
        self.root = Path(out)
        self.root.mkdir(parents=True, exist_ok=True)
        self.stage = stage
        self.config = config
        self.artifacts: dict[str, str] = {}
        self.body: dict = {}
        self.t0 = time.perf_counter()

    def write(self, rel: str, data: bytes) -> str:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        self.artifacts[rel] = sha256(data)
        return rel

    def write_checkpoint(self, rel: str, ckpt: Checkpoint) -> str:
        save_checkpoint(ckpt, self.root / rel)
        self.artifacts[rel] = sha256((self.root / rel).read_bytes())
        return rel

    def finish(self, status: str, **extra) -> dict:
        record = {
            "version": RECORD_VERSION,
            "stage": self.stage.value,
            "status": status,
            "config": self.config.snapshot(),
            **self.body,
            **extra,
            "artifacts": dict(sorted(self.artifacts.items())),
            "wall_clock_s": time.perf_counter() - self.t0,
        }
        (self.root / "record.json").write_text(json.dumps(record, indent=1, sort_keys=True, default=str))
        return record


def run_stage(fn, cfg: ExperimentConfig):
    """Run ``fn(cfg, writer)`` and always leave a record behind."""
    writer = RecordWriter(cfg.out, cfg.stage, cfg)
    try:
        extra = fn(cfg, writer) or {}
    except UndefinedMetricError as exc:
        writer.finish("undefined_metric", error=str(exc))
        raise
    except Exception as exc:
        writer.finish("failed", error=f"{type(exc).__name__}: {exc}")
        raise
    return writer.finish("complete", **extra)


def verify_record(path) -> list[str]:
    """Artifacts that are missing or whose digest does not match; empty when intact."""
    path = Path(path)
    root = path if path.is_dir() else path.parent
    record = json.loads((root / "record.json").read_text())
    bad = []
    for rel, digest in record["artifacts"].items():
        f = root / rel
        if not f.exists() or sha256(f.read_bytes()) != digest:
            bad.append(rel)
    return bad


def load_record(path) -> tuple[dict, Path]:
    path = Path(path)
    root = path if path.is_dir() else path.parent
    try:
        return json.loads((root / "record.json").read_text()), root
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read record under {root}: {exc}") from None


# ---------------------------------------------------------------- data


def load_cohort(cfg: ExperimentConfig) -> Cohort:
    """Signals cohort for modelling stages: a signal log, or an event log cleaned on the fly."""
    labels = parse_labels(Path(cfg.labels)) if cfg.labels else None
    if cfg.signals:
        return parse_signal_log(Path(cfg.signals), labels)
    if cfg.events:
        events = parse_event_log(Path(cfg.events), cfg.task_kind, labels)
        cohort, _ = preprocess_cohort(events, _cleaning(cfg), cfg.segment)
        return cohort
    raise ConfigError(f"stage {cfg.stage.value} needs signals or events")


def _cleaning(cfg: ExperimentConfig) -> CleaningConfig:
    try:
        return CleaningConfig(task_kind=cfg.task_kind, **cfg.cleaning)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cleaning: {exc}") from None


def _check_cohort(cohort: Cohort) -> None:
    counts = cohort.label_counts()
    if len(cohort) == 0:
        raise IngestError("no usable subjects after validation")
    if not counts.get(0) or not counts.get(1):
        raise IngestError(f"both classes are required, got counts {counts}")


# ---------------------------------------------------------------- cross-validation


@dataclass
class MemberResult:
    member: int
    history: object
    ckpt: Checkpoint
    val_probs: dict


@dataclass
class FoldResult:
    fold: int  # 1-based
    val_subjects: list
    plan: ResamplingPlan
    members: list = field(default_factory=list)
    probs: dict = field(default_factory=dict)
    auc: float = math.nan
    f1: float = math.nan
    n_subjects: int = 0

    def best_member(self) -> MemberResult:
        return self.members[best_index([m.ckpt.meta.get("val_auc", math.nan) for m in self.members])]


def _nan_low(x) -> float:
    return -math.inf if x is None or math.isnan(x) else x


def best_index(values: Sequence[float]) -> int:
    """Index of the maximum, NaN lowest, first on ties."""
    keyed = [(_nan_low(v), -i) for i, v in enumerate(values)]
    return -max(keyed)[1]


def _train_member(task):
    (fold, k, arch, model_opts, tcfg, train_set, val_set, stats, windowing,
     member, init, policy, lr) = task
    if init is None:
        spec = ModelSpec(arch, **model_opts, seed=tcfg.seed)
        model = Classifier(spec)
        history, ckpt = train(model, train_set, val_set, tcfg, stats, windowing, member)
    else:
        history, ckpt, model = fine_tune(init, train_set, val_set, policy, tcfg, stats, lr, member)
    probs = model.predict_proba(val_set.X, tcfg.eval_batch_size)
    scores = aggregate_patient(probs, val_set.subjects, val_set.sessions, val_set.labels, tcfg.aggregation)
    return fold, k, history, ckpt, scores_to_dict(scores)


def _fold_split(ws: WindowSet, order: list, plan: FoldPlan, fold: int):
    held = set(plan.folds[fold])
    train_ids = [s for s in order if s not in held]
    train_raw = ws.select(train_ids)
    val_raw = ws.select(plan.folds[fold])
    stats = train_raw.fit_stats()
    return train_raw.standardized(stats), val_raw.standardized(stats, held_out=True), stats


def cross_validate(
    ws: WindowSet,
    plan: FoldPlan,
    arch,
    model_opts: dict,
    tcfg: TrainConfig,
    strategy: Strategy,
    fractions,
    seed: int,
    windowing: WindowingConfig,
    jobs: int = 1,
    init: Checkpoint | None = None,
    policy: FreezePolicy | None = None,
    lr: float | None = None,
) -> list[FoldResult]:
    """Train every (fold, member) pair and score each fold's ensemble on its validation subjects.

    Channel statistics are refit on each fold's training windows. The result is
    independent of ``jobs``: every task carries its own seeds.
    """
    order = list(ws.labels)
    results, tasks = [], []
    for f in range(plan.k):
        train_set, val_set, stats = _fold_split(ws, order, plan, f)
        present = sorted(set(train_set.subjects.tolist()), key=order.index)
        rplan = make_plan(strategy, {s: ws.labels[s] for s in present}, derive_seed(seed, 2, f), fractions)
        rplan.check_excludes(plan.folds[f])
        results.append(FoldResult(f + 1, list(plan.folds[f]), rplan))
        for k, member in enumerate(rplan.members):
            mcfg = replace(tcfg, seed=derive_seed(seed, 3, f, k))
            tasks.append((f, k, arch, model_opts, mcfg, train_set, val_set, stats, windowing,
                          member, init, policy, lr))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_train_member, tasks))
    else:
        outputs = [_train_member(t) for t in tasks]
    for f, k, history, ckpt, probs in outputs:
        results[f].members.append(MemberResult(k, history, ckpt, probs))
    for res in results:
        res.probs = ensemble_aggregate([m.val_probs for m in res.members])
        scores = scores_from_dict(res.probs, ws.labels)
        missing_subjects(scores, res.val_subjects)
        res.n_subjects = len(scores)
        try:
            res.auc = auc_roc(scores)
        except UndefinedMetricError:
            log.warning("fold %d: AUC undefined (one class among validation subjects)", res.fold)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res.f1 = f1(scores)
    return results


def nan_mean(xs) -> float:
    vals = [x for x in xs if not math.isnan(x)]
    return math.fsum(vals) / len(vals) if vals else math.nan


def metrics_rows(stage, arch, balancing, variant, folds: list[FoldResult]) -> list[list[str]]:
    rows = [[stage, arch, balancing, variant, str(r.fold), _num(r.auc), _num(r.f1), str(r.n_subjects)]
            for r in folds]
    rows.append([stage, arch, balancing, variant, "mean",
                 _num(nan_mean([r.auc for r in folds])), _num(nan_mean([r.f1 for r in folds])),
                 str(sum(r.n_subjects for r in folds))])
    return rows


def metrics_csv(rows) -> bytes:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    w.writerows(rows)
    return buf.getvalue().encode()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _persist_folds(writer: RecordWriter, folds: list[FoldResult], prefix: str = "") -> list[dict]:
    out = []
    for r in folds:
        for m in r.members:
            tag = f"{prefix}{r.fold}_{m.member}"
            hist = writer.write(f"history/{tag}.csv", m.history.to_csv())
            ck = writer.write_checkpoint(f"ckpt/{tag}.npz", m.ckpt)
            out.append({
                "fold": r.fold, "member": m.member, "history": hist, "checkpoint": ck,
                "epochs": len(m.history), "best_epoch": m.history.best_epoch,
                "selected_epoch": m.history.selected_epoch, "stopped_early": m.history.stopped_early,
                "val_auc": m.ckpt.meta.get("val_auc"),
            })
    return out


def _fold_summary(folds: list[FoldResult]) -> dict:
    best = best_index([r.auc for r in folds])
    return {
        "mean_auc": nan_mean([r.auc for r in folds]),
        "mean_f1": nan_mean([r.f1 for r in folds]),
        "fold_auc": [r.auc for r in folds],
        "best_fold": folds[best].fold,
    }


# ---------------------------------------------------------------- stages


def stage_synth(cfg: ExperimentConfig, writer: RecordWriter):
    cfg.require()
    try:
        scfg = SynthConfig.from_dict({**cfg.synth, "seed": cfg.seed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth: {exc}") from None
    events, labels = generate_cohort(scfg)
    writer.write("events.csv", events)
    writer.write("labels.csv", labels)
    return {"synth": scfg.to_dict()}


def stage_preprocess(cfg: ExperimentConfig, writer: RecordWriter):
    cfg.require("events")
    labels = parse_labels(Path(cfg.labels)) if cfg.labels else None
    events = parse_event_log(Path(cfg.events), cfg.task_kind, labels)
    cohort, report = preprocess_cohort(events, _cleaning(cfg), cfg.segment)
    for reason, n in events.report.reasons.items():
        report.reasons[reason] += n
    writer.write("signals.csv", write_signal_log(cohort))
    writer.write("labels.csv", write_labels(cohort))
    writer.write("validation.json", json.dumps(report.to_dict(), indent=1, sort_keys=True).encode())
    return {"validation": report.to_dict(), "n_subjects": len(cohort)}


def _search(cfg, cohort, plan, tcfg, writer) -> tuple[dict, SearchTrace | None]:
    chosen = {"window_size": cfg.window_size, "stride": cfg.stride,
              "batch_size": tcfg.batch_size, "lr": tcfg.lr}
    if not cfg.search.get("enabled"):
        return chosen, None
    if "space" in cfg.search:
        space = SearchSpace.from_dict(cfg.search["space"])
    else:
        space = default_space(cfg.search.get("dataset_class", "fixed_text_short"))
    cache = {}

    def evaluator(c):
        key = (c["window_size"], c["stride"])
        if key not in cache:
            cache[key] = cohort_windows(cohort, WindowingConfig(*key))
        wcfg = WindowingConfig(*key)
        tc = replace(tcfg, batch_size=c["batch_size"], lr=c["lr"])
        folds = cross_validate(cache[key], plan, cfg.arch, cfg.model, tc, cfg.balance,
                               cfg.fractions, cfg.seed, wcfg, cfg.jobs)
        return nan_mean([r.auc for r in folds])

    chosen, trace = forward_select(space, evaluator)
    return chosen, trace


def stage_pretrain(cfg: ExperimentConfig, writer: RecordWriter):
    cfg.require()
    cohort = load_cohort(cfg)
    _check_cohort(cohort)
    tcfg = cfg.train_config()
    plan = make_folds(cohort.labels, cfg.k, cfg.seed)
    writer.body["fold_plan"] = plan.to_dict()
    chosen, trace = _search(cfg, cohort, plan, tcfg, writer)
    writer.write("trace.csv", (trace or SearchTrace()).to_csv(cfg.arch.value, cfg.balance.value))
    wcfg = WindowingConfig(chosen["window_size"], chosen["stride"])
    tcfg = replace(tcfg, batch_size=chosen["batch_size"], lr=chosen["lr"])
    ws = cohort_windows(cohort, wcfg)
    folds = cross_validate(ws, plan, cfg.arch, cfg.model, tcfg, cfg.balance, cfg.fractions,
                           cfg.seed, wcfg, cfg.jobs)
    runs = _persist_folds(writer, folds)
    rows = metrics_rows("pretrain", cfg.arch.value, cfg.balance.value, "", folds)
    writer.write("metrics.csv", metrics_csv(rows))
    summary = _fold_summary(folds)
    best = folds[best_index([r.auc for r in folds])]
    bm = best.best_member()
    return {
        "resampling_plans": {str(r.fold): r.plan.to_dict() for r in folds},
        "runs": runs,
        "search": {"enabled": bool(trace), "chosen": chosen, "calls": trace.calls if trace else 0},
        "hyperparameters": {"WS": wcfg.window_size, "ST": wcfg.stride, "LR": tcfg.lr, "BS": tcfg.batch_size},
        "summary": {**summary, "arch": cfg.arch.value, "balancing": cfg.balance.value, "dataset": cfg.name},
        "selected": {
            "fold": best.fold,
            "member": bm.member,
            "checkpoint": f"ckpt/{best.fold}_{bm.member}.npz",
            "fold_checkpoints": [f"ckpt/{best.fold}_{m.member}.npz" for m in best.members],
        },
        "subjects_seen": sorted(cohort.subject_ids),
    }


def resolve_source(path) -> tuple[Checkpoint, dict | None, Path]:
    """A checkpoint and (when available) the record it came from."""
    path = Path(path)
    if path.suffix == ".npz":
        return load_checkpoint(path), None, path.parent
    record, root = load_record(path)
    if record.get("status") != "complete":
        raise ConfigError(f"source record {root} is not complete")
    sel = record.get("selected", {})
    if "checkpoint" not in sel:
        raise ConfigError(f"source record {root} selects no checkpoint")
    return load_checkpoint(root / sel["checkpoint"]), record, root


def _assert_disjoint(cohort: Cohort, seen: Sequence[str], what: str) -> None:
    overlap = set(cohort.subject_ids) & set(seen)
    if overlap:
        raise LeakageError(f"{what} cohort shares subjects with earlier stages: {sorted(overlap)[:5]}")


def stage_finetune(cfg: ExperimentConfig, writer: RecordWriter):
    cfg.require("source")
    source, src_record, _ = resolve_source(cfg.source)
    seen = list(src_record.get("subjects_seen", [])) if src_record else []
    seen += sorted(source.stats.fitted_on)
    cohort = load_cohort(cfg)
    _check_cohort(cohort)
    _assert_disjoint(cohort, seen, "fine-tune")
    tcfg = cfg.train_config()
    wcfg = source.windowing
    plan = make_folds(cohort.labels, cfg.k, cfg.seed)
    writer.body["fold_plan"] = plan.to_dict()
    writer.write("trace.csv", SearchTrace().to_csv(source.spec.arch.value, cfg.finetune_balance.value))
    ws = cohort_windows(cohort, wcfg)
    lr = cfg.finetune_lr if cfg.finetune_lr is not None else float(source.meta["lr"]) / 10.0
    branches, rows, runs = {}, [], []
    arch = source.spec.arch.value
    for p in cfg.policies:
        policy = FreezePolicy(p)
        folds = cross_validate(ws, plan, source.spec.arch, {}, tcfg, cfg.finetune_balance, cfg.fractions,
                               cfg.seed, wcfg, cfg.jobs, init=source, policy=policy, lr=lr)
        runs += [{**r, "policy": p} for r in _persist_folds(writer, folds, prefix=f"{p}_")]
        rows += metrics_rows("finetune", arch, cfg.finetune_balance.value, p, folds)
        best = folds[best_index([r.auc for r in folds])]
        branches[p] = {
            **_fold_summary(folds),
            "resampling_plans": {str(r.fold): r.plan.to_dict() for r in folds},
            "fold_checkpoints": [f"ckpt/{p}_{best.fold}_{m.member}.npz" for m in best.members],
        }
    writer.write("metrics.csv", metrics_csv(rows))
    selected = select_policy({p: b["mean_auc"] for p, b in branches.items()})
    sel = branches[selected]
    return {
        "branches": branches,
        "runs": runs,
        "lr": lr,
        "source": {"path": str(cfg.source), "arch": arch, "digest": source.build().parameters.digest()},
        "hyperparameters": {"WS": wcfg.window_size, "ST": wcfg.stride, "LR": lr, "BS": tcfg.batch_size},
        "summary": {"arch": arch, "balancing": cfg.finetune_balance.value, "dataset": cfg.name,
                    "selected_policy": selected, "mean_auc": sel["mean_auc"], "mean_f1": sel["mean_f1"],
                    "best_fold": sel["best_fold"],
                    "policies": {p: {"mean_auc": b["mean_auc"], "mean_f1": b["mean_f1"]}
                                 for p, b in branches.items()}},
        "selected": {"policy": selected, "fold": sel["best_fold"],
                     "checkpoint": sel["fold_checkpoints"][0],
                     "fold_checkpoints": sel["fold_checkpoints"]},
        "subjects_seen": sorted(set(seen) | set(cohort.subject_ids)),
    }


def select_policy(mean_auc: dict) -> str:
    """Policy with the higher mean validation AUC; full fine-tuning wins ties."""
    order = sorted(mean_auc, key=lambda p: p != "full")
    return order[best_index([mean_auc[p] for p in order])]


def stage_external(cfg: ExperimentConfig, writer: RecordWriter):
    cfg.require("source")
    record, root = load_record(cfg.source)
    if record.get("status") != "complete":
        raise ConfigError(f"source record {root} is not complete")
    sel = record["selected"]
    ckpts = [load_checkpoint(root / p) for p in sel["fold_checkpoints"]]
    cohort = load_cohort(cfg)
    _assert_disjoint(cohort, record.get("subjects_seen", []), "external")
    member_probs, digests = [], []
    for ck in ckpts:
        model = ck.build()
        before = model.parameters.digest()
        ws = cohort_windows(cohort, ck.windowing).standardized(ck.stats, held_out=True)
        probs = model.predict_proba(ws.X)
        after = model.parameters.digest()
        if before != after:
            raise RuntimeError("parameters changed during external validation")
        digests.append({"before": before, "after": after})
        scores = aggregate_patient(probs, ws.subjects, ws.sessions, ws.labels)
        member_probs.append(scores_to_dict(scores))
    probs = ensemble_aggregate(member_probs)
    scores = scores_from_dict(probs, cohort.labels)
    missing = missing_subjects(scores, cohort.subject_ids)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        f1_value = f1(scores)
    arch = record["summary"]["arch"]
    balancing = record["summary"]["balancing"]
    variant = sel.get("policy", "")
    try:
        auc = auc_roc(scores)
        undefined = None
    except UndefinedMetricError as exc:
        auc, undefined = math.nan, exc
    rows = [["external", arch, balancing, variant, str(sel["fold"]), _num(auc), _num(f1_value), str(len(scores))]]
    writer.write("metrics.csv", metrics_csv(rows))
    writer.write("trace.csv", SearchTrace().to_csv(arch, balancing))
    writer.write("predictions.csv", _predictions_csv(scores))
    writer.body.update({
        "source": {"record": str(cfg.source), "stage": record["stage"], "checkpoints": sel["fold_checkpoints"]},
        "parameter_digests": digests,
        "gradient_updates": 0,
        "missing_subjects": missing,
        "summary": {"arch": arch, "balancing": balancing, "dataset": cfg.name, "source_stage": record["stage"],
                    "auc": auc, "f1": f1_value, "best_fold": sel["fold"], "policy": variant},
    })
    if undefined is not None:
        raise undefined
    return {}


def _predictions_csv(scores) -> bytes:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject_id", "label", "prob"])
    for s in scores:
        w.writerow([s.subject_id, s.label, repr(float(s.prob))])
    return buf.getvalue().encode()


STAGES = {
    Stage.SYNTH: stage_synth,
    Stage.PREPROCESS: stage_preprocess,
    Stage.PRETRAIN: stage_pretrain,
    Stage.FINETUNE: stage_finetune,
    Stage.EXTERNAL: stage_external,
}


def run(cfg: ExperimentConfig) -> dict:
    if cfg.stage is Stage.REPORT:
        from .report import run_report
        return run_report(cfg)
    return run_stage(STAGES[cfg.stage], cfg)


def run_pretrain(cfg: ExperimentConfig) -> dict:
    return run_stage(stage_pretrain, cfg)


def run_finetune(cfg: ExperimentConfig) -> dict:
    return run_stage(stage_finetune, cfg)


def run_external(cfg: ExperimentConfig) -> dict:
    return run_stage(stage_external, cfg)
