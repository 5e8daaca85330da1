import math

import numpy as np
import pytest

from kdscreen.ingest import LOW_TYPING_RATE, Cohort, Subject, TaskKind
from kdscreen.signals import (CleaningConfig, SignalError, clean_fixed_text, clean_free_text,
                              derive_signals, preprocess_cohort, segment_sessions, typing_rate)

from conftest import make_session, random_session

FIXED = CleaningConfig(TaskKind.FIXED_TEXT)


def test_derive_basic():
    seq = derive_signals(make_session([0.0, 0.3], [0.1, 0.45]))
    np.testing.assert_allclose(seq.ht, [0.15])
    np.testing.assert_allclose(seq.ft, [0.2])
    np.testing.assert_allclose(seq.pp, [0.3])
    np.testing.assert_allclose(seq.rr, [0.35])


def test_rollover_ft_negative_kept():
    seq = derive_signals(make_session([0.0, 0.2], [0.5, 0.6]))
    assert seq.ft[0] == pytest.approx(-0.3)


def test_derive_needs_two_events():
    with pytest.raises(SignalError):
        derive_signals(make_session([0.0], [0.1]))


def test_rr_identity_random_streams(rng):
    worst = 0.0
    for _ in range(1000):
        s = random_session(rng, int(rng.integers(2, 60)))
        seq = derive_signals(s)
        assert len(seq) == len(s) - 1
        worst = max(worst, float(np.max(np.abs(seq.rr - (seq.ht + seq.ft)))))
    assert worst < 1e-9


def test_translation_invariance(rng):
    s = random_session(rng, 40)
    shifted = make_session(s.press + 123.25, s.release + 123.25)
    a, b = derive_signals(s), derive_signals(shifted)
    for c in ("ht", "ft", "pp", "rr"):
        np.testing.assert_allclose(getattr(a, c), getattr(b, c), atol=1e-12)


def test_typing_rate():
    assert typing_rate(make_session(np.linspace(0, 60, 40), np.linspace(0, 60, 40) + 0.1)) == pytest.approx(40.0)
    assert typing_rate(make_session(np.linspace(0, 60, 10), np.linspace(0, 60, 10) + 0.1)) == pytest.approx(10.0)
    assert typing_rate(make_session([1.0, 1.0], [1.1, 1.2])) == math.inf
    with pytest.raises(SignalError):
        typing_rate(make_session([0.0], [0.1]))


def _session_with_ft(ft, ht=0.1):
    press, release = [0.0], [ht]
    for f in ft:
        press.append(release[-1] + f)
        release.append(press[-1] + ht)
    return make_session(press, release)


def test_ft_cap_removes_steps():
    s = _session_with_ft([0.2, 3.5, 0.4])
    seq = derive_signals(s)
    out = clean_fixed_text(seq, s, FIXED)
    assert len(out) == 2
    np.testing.assert_allclose(out.ft, [0.2, 0.4])
    np.testing.assert_allclose(out.ht, seq.ht[[0, 2]])


def test_low_rate_rejected():
    # 20 events over 60.3 s is 19.9 cpm
    press = np.linspace(0, 60.3, 20)
    s = make_session(press, press + 0.05)
    assert typing_rate(s) == pytest.approx(19.9, abs=0.01)
    assert clean_fixed_text(derive_signals(s), s, FIXED) is None


def test_clean_identity_and_idempotent(rng):
    s = _session_with_ft([0.2, 0.3, 0.25])
    seq = derive_signals(s)
    assert clean_fixed_text(seq, s, FIXED) == seq
    for _ in range(200):
        ft = rng.exponential(1.0, int(rng.integers(2, 40)))
        s = _session_with_ft(ft)
        once = clean_fixed_text(derive_signals(s), s, FIXED)
        if once is None:
            continue
        assert np.all(once.ft <= 3.0)
        assert clean_fixed_text(once, s, FIXED) == once
        assert len(once) == int(np.sum(derive_signals(s).ft <= 3.0))


def test_free_text_identity():
    s = _session_with_ft([5.0, 0.2])
    seq = derive_signals(s)
    assert clean_free_text(seq) is seq
    assert seq.ft[0] == pytest.approx(5.0)


def test_segmentation_examples():
    s = make_session([0.0, 1.0, 32.0, 34.0], [0.1, 1.1, 32.1, 34.1])
    parts = segment_sessions(s, 30.0)
    assert [len(p) for p in parts] == [2, 2]
    assert [p.session_id for p in parts] == ["d0_0", "d0_1"]
    exact = make_session([0.0, 30.0], [0.1, 30.1])
    assert segment_sessions(exact, 30.0) == [exact]
    short = make_session([0.0, 1.0, 2.0], [0.1, 1.1, 2.1])
    assert segment_sessions(short, 30.0)[0] is short


def test_segmentation_conserves_events(rng):
    for _ in range(300):
        n = int(rng.integers(1, 80))
        gaps = np.where(rng.random(n) < 0.1, rng.uniform(29, 60, n), rng.exponential(0.3, n))
        press = np.cumsum(gaps)
        s = make_session(press, press + 0.05)
        parts = segment_sessions(s, 30.0)
        assert sum(len(p) for p in parts) == len(s)
        np.testing.assert_array_equal(np.concatenate([p.press for p in parts]), s.press)
        assert len(parts) == 1 + int(np.sum(np.diff(press) > 30.0))


def test_config_thresholds_positive():
    with pytest.raises(ValueError):
        CleaningConfig(min_typing_rate=0)


def test_preprocess_counts():
    good = _session_with_ft([0.2, 0.3])
    slow = make_session([0.0, 30.0, 60.0], [0.1, 30.1, 60.1])
    c = Cohort((Subject("s1", 1, (good, slow)),))
    out, report = preprocess_cohort(c, FIXED)
    assert report.reasons[LOW_TYPING_RATE] == 1
    assert report.accepted_sessions == 1
    assert len(out.subjects[0].sessions) == 1
    free, rep2 = preprocess_cohort(c, CleaningConfig(TaskKind.FREE_TEXT))
    assert rep2.accepted_sessions == 2
