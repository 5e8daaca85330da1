"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line at the end of the run.

Criteria 9 to 11 share the synthetic benchmark (40 subjects, gru_fcn, IMBALMED,
W=50, S=25, patience 5, focal loss, best-validation checkpoints, K=10). Those
runs take several minutes each on one core.
"""
import math
import os
import time
from itertools import product

import numpy as np
import pytest

from conftest import make_session, random_session, tiny_split
from kdscreen.balance import DEFAULT_FRACTIONS, Strategy, imbalmed_plan, make_plan, undersample
from kdscreen.config import ExperimentConfig
from kdscreen.evaluation import PatientScore, auc_roc, make_folds, scores_from_dict
from kdscreen.ingest import (SignalSequence, TaskKind, parse_event_log, parse_labels, write_labels,
                             write_signal_log)
from kdscreen.nn.gradcheck import grad_check
from kdscreen.nn.losses import bce_with_logits, focal_loss
from kdscreen.nn.models import Arch, Classifier, ModelSpec
from kdscreen.orchestrator import load_record, run_pretrain, verify_record
from kdscreen.search import AXES, SearchSpace, forward_select
from kdscreen.signals import (CleaningConfig, clean_fixed_text, derive_signals, preprocess_cohort,
                              segment_sessions, typing_rate)
from kdscreen.synth import SynthConfig, generate_cohort, per_subject_statistic, shuffle_labels
from kdscreen.training import TrainConfig, fine_tune, train
from kdscreen.windowing import WindowingConfig, slide, window_count

FIXED = CleaningConfig(TaskKind.FIXED_TEXT)


# ---------------------------------------------------------------- 1


def test_c01_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    errs = {a.value: grad_check(ModelSpec(a, hidden=8, fcn_channels=(8, 8, 8), ff_width=16, seed=0),
                                seed=0, window=12, batch=2) for a in Arch}
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst < 1e-4 and elapsed < 60
    criterion(1, ok, f"max rel err {worst:.2e} over {len(errs)} archs (<1e-4), {elapsed:.1f} s (<60 s)")
    assert ok, errs


# ---------------------------------------------------------------- 2


def test_c02_loss_reductions(criterion):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 64))
        z = rng.normal(0, 5, n)
        y = rng.integers(0, 2, n)
        worst = max(worst, abs(float(focal_loss(z, y, 0.0, 0.5).data) - 0.5 * float(bce_with_logits(z, y).data)))
    formula = 0.25 * 0.75 ** 2 * -math.log(0.25)
    point = float(focal_loss([math.log(0.25 / 0.75)], [1], 2.0, 0.25).data)
    ok = worst < 1e-12 and abs(point - formula) < 1e-6
    criterion(2, ok, f"focal(0,0.5) vs BCE/2 max diff {worst:.1e}; single point {point:.7f} vs "
                     f"0.25*0.75^2*ln4 = {formula:.7f} (the rounded 0.194963 is 1.5e-5 off its own formula)")
    assert ok


# ---------------------------------------------------------------- 3


def _pairwise(sc):
    pos = [s.prob for s in sc if s.label == 1]
    neg = [s.prob for s in sc if s.label == 0]
    return sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in product(pos, neg)) / (len(pos) * len(neg))


def test_c03_metric_oracle(criterion):
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = np.round(rng.random(n), int(rng.integers(1, 3)))
        sc = [PatientScore(str(i), float(p), int(t)) for i, (p, t) in enumerate(zip(s, y))]
        mismatches += auc_roc(sc) != _pairwise(sc)
    ex = auc_roc([PatientScore("a", 0.8, 1), PatientScore("b", 0.4, 1),
                  PatientScore("c", 0.6, 0), PatientScore("d", 0.2, 0)])
    ok = mismatches == 0 and ex == 0.75
    criterion(3, ok, f"{mismatches}/200 mismatches vs pairwise oracle; worked example {ex}")
    assert ok


# ---------------------------------------------------------------- 4


def test_c04_preprocessing_contracts(criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        seq = derive_signals(random_session(rng, int(rng.integers(2, 80))))
        worst = max(worst, float(np.max(np.abs(seq.rr - (seq.ht + seq.ft)))))
    conserved = True
    for _ in range(300):
        n = int(rng.integers(1, 80))
        gaps = np.where(rng.random(n) < 0.1, rng.uniform(29, 60, n), rng.exponential(0.3, n))
        press = np.cumsum(gaps)
        s = make_session(press, press + 0.05)
        parts = segment_sessions(s, 30.0)
        conserved &= sum(len(p) for p in parts) == len(s) and len(parts) == 1 + int(np.sum(np.diff(press) > 30))
    exact, idem = True, True
    for _ in range(300):
        n = int(rng.integers(3, 60))
        ht = rng.uniform(0.05, 0.2, n)
        ft = np.where(rng.random(n) < 0.15, rng.uniform(3.0, 6.0, n), rng.uniform(0.05, 0.5, n))
        ft[rng.random(n) < 0.05] = 3.0  # exactly at the cap is kept
        release = np.cumsum(ht + ft)
        press = release - ht
        s = make_session(press, release)
        seq = derive_signals(s)
        if typing_rate(s) < 20:
            continue
        out = clean_fixed_text(seq, s, FIXED)
        exact &= len(out) == int(np.sum(seq.ft <= 3.0)) and bool(np.all(out.ft <= 3.0))
        idem &= clean_fixed_text(out, s, FIXED) == out
    slow = np.linspace(0, 60.3, 20)  # 19.9 cpm
    rejected = clean_fixed_text(derive_signals(make_session(slow, slow + 0.05)),
                                make_session(slow, slow + 0.05), FIXED) is None
    ok = worst < 1e-9 and conserved and exact and idem and rejected
    criterion(4, ok, f"rr-(ht+ft) max {worst:.1e}; segmentation conserves={conserved}; "
                     f"ft>3 s removal exact={exact}; <20 cpm rejected={rejected}; idempotent={idem}")
    assert ok


# ---------------------------------------------------------------- 5


def test_c05_windowing_arithmetic(criterion):
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(1000):
        L, W, S = int(rng.integers(0, 300)), int(rng.integers(1, 120)), int(rng.integers(1, 120))
        expect = (L - W) // S + 1 if L >= W else 0
        m = rng.random((L, 4))
        seq = SignalSequence("s", "d", *m.T) if L else None
        got = len(slide(seq, WindowingConfig(W, S))) if L else window_count(0, WindowingConfig(W, S))
        bad += got != expect or window_count(L, WindowingConfig(W, S)) != expect
    overlap = 0
    for W in (5, 17, 50):
        seq = SignalSequence("s", "d", *rng.random((400, 4)).T)
        spans = [set(range(w.start, w.start + W)) for w in slide(seq, WindowingConfig(W, W))]
        overlap += sum(len(a & b) for i, a in enumerate(spans) for b in spans[i + 1:])
    ok = bad == 0 and overlap == 0
    criterion(5, ok, f"{bad}/1000 count mismatches (incl. L<W); stride=W overlaps {overlap}")
    assert ok


# ---------------------------------------------------------------- 6


def _labels(n_pd, n_hc):
    return {f"p{i}": 1 for i in range(n_pd)} | {f"h{i}": 0 for i in range(n_hc)}


def test_c06_balancing(criterion):
    rng = np.random.default_rng(6)
    parity = all(
        sorted(lab[s] for s in undersample(lab, seed).members[0].subject_ids).count(1) * 2
        == len(undersample(lab, seed).members[0])
        for seed in range(20)
        for lab in [_labels(int(rng.integers(3, 80)), int(rng.integers(3, 80)))]
    )
    off_target, members = 0, 0
    for seed in range(100):
        m = int(rng.integers(5, 40))
        lab = _labels(m, int(rng.integers(4 * m, 4 * m + 100)))  # enough majority for every rung
        for mem in imbalmed_plan(lab, DEFAULT_FRACTIONS, seed).members:
            members += 1
            off_target += abs(mem.achieved_minority_fraction - mem.target_minority_fraction) > 1 / len(mem)
    violations = 0
    lab = _labels(57, 46)
    for seed in range(100):
        folds = make_folds(lab, 10, seed)
        f = seed % 10
        train_lab = {s: lab[s] for s in folds.train_subjects(f, list(lab))}
        for strategy in Strategy:
            violations += bool(make_plan(strategy, train_lab, seed).subjects() & set(folds.folds[f]))
    ok = parity and off_target == 0 and violations == 0
    criterion(6, ok, f"undersample parity={parity}; IMBALMED {off_target}/{members} members off target "
                     f"by more than 1/|member|; {violations} validation-subject violations in 100 trials")
    assert ok


# ---------------------------------------------------------------- 7


def test_c07_fold_plan(criterion):
    lab = _labels(57, 46)
    violations = 0
    for seed in range(100):
        folds = make_folds(lab, 10, seed).folds
        flat = [s for f in folds for s in f]
        partition = len(flat) == len(set(flat)) == 103
        sizes = all(len(f) in (10, 11) for f in folds)
        prop = all(abs(sum(lab[s] for s in f) - len(f) * 57 / 103) <= 1 for f in folds)
        violations += not (partition and sizes and prop)
    criterion(7, violations == 0, f"{violations}/100 seeds violate partition, size or PD proportion")
    assert violations == 0


# ---------------------------------------------------------------- 8


def test_c08_freeze_contract(criterion):
    tr, va, stats, wc = tiny_split(seed=0)
    src_model = Classifier(ModelSpec(Arch.GRU_FCN, hidden=4, fcn_channels=(4, 4, 4), fcn_kernels=(3, 3, 2)))
    _, src = train(src_model, tr, va, TrainConfig(epochs=1, patience=None, batch_size=16), stats, wc)
    tr2, va2, stats2, _ = tiny_split(seed=8, prefix="f")
    hist, ck, model = fine_tune(src, tr2, va2, "head_only", TrainConfig(epochs=5, patience=None, batch_size=8),
                                stats2)
    changed = [n for n in src.params if not model.parameters.is_head(n)
               and not np.array_equal(src.params[n], ck.params[n])]
    head_moved = any(not np.array_equal(src.params[n], ck.params[n]) for n in src.params
                     if model.parameters.is_head(n))
    ok = not changed and head_moved and len(hist) == 5
    criterion(8, ok, f"{len(changed)} backbone tensors changed over {len(hist)} epochs; head updated={head_moved}")
    assert ok


# ---------------------------------------------------------------- 9-11


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    ev, lab = generate_cohort(SynthConfig(seed=0))
    cohort = parse_event_log(ev.decode(), TaskKind.FREE_TEXT, parse_labels(lab.decode()))
    sig, _ = preprocess_cohort(cohort, CleaningConfig(TaskKind.FREE_TEXT))
    cache = {}

    def run(tag, shuffled=False):
        if tag in cache:
            return cache[tag]
        d = root / tag
        d.mkdir()
        data = shuffle_labels(sig, 0) if shuffled else sig
        (d / "signals.csv").write_bytes(write_signal_log(data))
        (d / "labels.csv").write_bytes(write_labels(data))
        cfg = ExperimentConfig(stage="pretrain", seed=0, out=str(d / "run"), signals=str(d / "signals.csv"),
                               labels=str(d / "labels.csv"), arch="gru_fcn", balance="imbalmed",
                               window_size=50, stride=25, k=10, jobs=min(4, os.cpu_count() or 1),
                               train={"patience": 5, "loss": "focal", "checkpoint_strategy": "best_validation"})
        t0 = time.perf_counter()
        rec = run_pretrain(cfg)
        cache[tag] = (rec, d / "run", time.perf_counter() - t0)
        return cache[tag]

    return sig, run


@pytest.mark.slow
def test_c10_benchmark(benchmark, criterion):
    sig, run = benchmark
    stat = per_subject_statistic(sig, "ht")
    oracle = auc_roc(scores_from_dict(stat, sig.labels))
    rec, _, elapsed = run("real")
    auc = rec["summary"]["mean_auc"]
    ok = oracle >= 0.95 and auc >= 0.85 and elapsed < 600
    criterion(10, ok, f"feature-level oracle AUC {oracle:.3f} (>=0.95); mean validation AUC {auc:.3f} (>=0.85); "
                      f"{elapsed:.0f} s on {min(4, os.cpu_count() or 1)} core(s) (<600 s)")
    assert ok


@pytest.mark.slow
def test_c09_determinism(benchmark, criterion):
    _, run = benchmark
    _, a, _ = run("real")
    _, b, _ = run("real_repeat")
    same = (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    intact = verify_record(a) == [] and verify_record(b) == []
    criterion(9, same and intact, f"metrics.csv byte-identical across repeated seeded runs={same}")
    assert same and intact


@pytest.mark.slow
def test_c11_negative_control(benchmark, criterion):
    sig, run = benchmark
    rec, _, _ = run("shuffled", shuffled=True)
    auc = rec["summary"]["mean_auc"]
    ok = 0.35 <= auc <= 0.65
    criterion(11, ok, f"shuffled-label mean validation AUC {auc:.3f} (target [0.35, 0.65]); "
                      f"fold AUCs {[round(a, 2) for a in rec['summary']['fold_auc']]}")
    assert ok


# ---------------------------------------------------------------- 12


def test_c12_transfer_protocol(pipeline, criterion):
    pre, ft, ext = pipeline["pretrain"], pipeline["finetune"], pipeline["external"]
    completed = all(r["status"] == "complete" for r in (pre, ft, ext))
    policies = set(ft["branches"]) == {"full", "head_only"}
    s = ext["summary"]
    reported = all(isinstance(s[k], float) and not math.isnan(s[k]) for k in ("auc", "f1"))
    frozen = ext["gradient_updates"] == 0 and all(d["before"] == d["after"] for d in ext["parameter_digests"])
    sel = ft["branches"][ft["summary"]["selected_policy"]]
    best_fold = s["best_fold"] == sel["best_fold"] == 1 + int(np.nanargmax(sel["fold_auc"]))
    # the pretraining cohort went through fixed-text cleaning
    fixed_src = load_record(pipeline["root"] / "a_pre")[0]["config"]["task_kind"] == "fixed_text"
    ok = completed and policies and reported and frozen and best_fold and fixed_src
    criterion(12, ok, f"completed={completed}; both policies={policies}; AUC {s['auc']:.3f} F1 {s['f1']:.3f}; "
                      f"zero updates (digest check)={frozen}; best fold {s['best_fold']} recorded={best_fold}")
    assert ok


# ---------------------------------------------------------------- 13


def test_c13_forward_selection(criterion):
    space = SearchSpace(window_size=(40, 50, 60))
    misses, calls = 0, set()
    for ws in space.window_size:
        for st in (1, ws // 2, ws):
            for bs in space.batch_size:
                for lr in space.lr:
                    opt = {"window_size": ws, "stride": st, "batch_size": bs, "lr": lr}
                    n = [0]

                    def f(cfg, opt=opt, n=n):
                        n[0] += 1
                        return sum(1.0 if cfg[a] == opt[a] else 0.0 for a in AXES)
                    chosen, trace = forward_select(space, f)
                    misses += chosen != opt
                    calls.add(n[0])
    ok = misses == 0 and calls == {12}
    criterion(13, ok, f"{misses}/81 planted optima missed; evaluator calls per search {sorted(calls)} (expect 12)")
    assert ok
