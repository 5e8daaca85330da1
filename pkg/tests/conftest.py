import numpy as np
import pytest

from kdscreen.ingest import SessionEvents, TaskKind


def make_session(press, release, sid="s1", sess="d0", kind=TaskKind.FIXED_TEXT):
    press = np.asarray(press, dtype=float)
    return SessionEvents(sid, sess, TaskKind(kind), tuple(f"k{i}" for i in range(press.size)),
                         press, np.asarray(release, dtype=float))


def random_session(rng, n, sid="s1", sess="d0", kind=TaskKind.FREE_TEXT):
    """Sorted presses with arbitrary (possibly overlapping) holds."""
    press = np.cumsum(rng.exponential(0.25, n))
    release = press + rng.exponential(0.1, n)
    return make_session(press, release, sid, sess, kind)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_split(seed=0, n_pd=4, n_hc=4, window=10, val_pd=1, val_hc=1, prefix="t"):
    """Standardized (train, val, stats, windowing) from a small synthetic cohort."""
    from kdscreen.ingest import TaskKind, parse_event_log
    from kdscreen.signals import CleaningConfig, preprocess_cohort
    from kdscreen.synth import SynthConfig, generate_cohort
    from kdscreen.windowing import WindowingConfig, cohort_windows

    ev, lab = generate_cohort(SynthConfig(n_pd=n_pd, n_hc=n_hc, sessions_mean=2, length_mean=60,
                                          subject_prefix=prefix, seed=seed))
    cohort = parse_event_log(ev.decode(), TaskKind.FREE_TEXT, lab.decode())
    sig, _ = preprocess_cohort(cohort, CleaningConfig(TaskKind.FREE_TEXT))
    wc = WindowingConfig(window, window)
    ws = cohort_windows(sig, wc)
    ids = sig.subject_ids
    val = [s for s in ids if "pd" in s][:val_pd] + [s for s in ids if "hc" in s][:val_hc]
    tr = ws.select([s for s in ids if s not in val])
    stats = tr.fit_stats()
    return tr.standardized(stats), ws.select(val).standardized(stats, held_out=True), stats, wc


SMALL_MODEL = {"hidden": 4, "fcn_channels": [4, 4, 4], "fcn_kernels": [3, 3, 2]}
SMALL_SYNTH = {"n_pd": 5, "n_hc": 5, "sessions_mean": 2, "length_mean": 60}


def stage_cfg(stage, out, **kw):
    from kdscreen.config import ExperimentConfig

    base = dict(stage=stage, seed=0, out=str(out), window_size=10, stride=10, k=3, model=SMALL_MODEL,
                train={"epochs": 2, "batch_size": 16, "lr": 0.01})
    base.update(kw)
    return ExperimentConfig(**base)


def small_cohort(root, prefix, seed=0, kind="free_text"):
    """Synthesize and preprocess a small cohort; returns (signals path, labels path)."""
    from kdscreen.orchestrator import run

    run(stage_cfg("synth", root / f"{prefix}_synth", seed=seed, synth={**SMALL_SYNTH, "subject_prefix": prefix}))
    run(stage_cfg("preprocess", root / f"{prefix}_pre", task_kind=kind,
                  events=str(root / f"{prefix}_synth/events.csv"), labels=str(root / f"{prefix}_synth/labels.csv")))
    return str(root / f"{prefix}_pre/signals.csv"), str(root / f"{prefix}_pre/labels.csv")


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """pretrain -> finetune -> external on three disjoint small cohorts."""
    from kdscreen.orchestrator import run

    root = tmp_path_factory.mktemp("pipeline")
    a = small_cohort(root, "a", 0, "fixed_text")
    b = small_cohort(root, "b", 1)
    c = small_cohort(root, "c", 2)
    out = {"root": root}
    out["pretrain"] = run(stage_cfg("pretrain", root / "pre", signals=a[0], labels=a[1], name="A"))
    out["finetune"] = run(stage_cfg("finetune", root / "ft", signals=b[0], labels=b[1], name="B",
                                    source=str(root / "pre")))
    out["external"] = run(stage_cfg("external_validate", root / "ext", signals=c[0], labels=c[1], name="C",
                                    source=str(root / "ft")))
    return out


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
