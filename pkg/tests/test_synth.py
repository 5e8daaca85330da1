import numpy as np
import pytest

from kdscreen.evaluation import auc_roc, scores_from_dict
from kdscreen.ingest import TaskKind, parse_event_log
from kdscreen.signals import CleaningConfig, derive_signals, preprocess_cohort
from kdscreen.synth import (
    HC_PROFILE, PhenotypeProfile, SynthConfig, generate_cohort, generate_session,
    per_subject_statistic, shuffle_labels,
)


def parse(cfg, kind=TaskKind.FREE_TEXT):
    ev, lab = generate_cohort(cfg)
    return parse_event_log(ev.decode(), kind, lab.decode())


def test_deterministic_and_seed_sensitive():
    a = generate_cohort(SynthConfig(n_pd=3, n_hc=3, seed=4))
    assert a == generate_cohort(SynthConfig(n_pd=3, n_hc=3, seed=4))
    assert a[0] != generate_cohort(SynthConfig(n_pd=3, n_hc=3, seed=5))[0]


def test_subjects_independent_of_cohort_size():
    small = parse(SynthConfig(n_pd=2, n_hc=2, seed=1))
    # subject k keeps its stream when more subjects are appended after it
    big = parse(SynthConfig(n_pd=2, n_hc=5, seed=1))
    assert small.subjects[0] == big.subjects[0]


def test_default_cohort_shape():
    c = parse(SynthConfig())
    assert c.label_counts() == {1: 20, 0: 20}
    assert all(len(s.sessions) == 4 for s in c.subjects)
    assert all(len(sess) == 200 for _, sess in c.sessions())


def test_zero_variance_profile_is_constant():
    p = PhenotypeProfile(ht_mean=0.12, ht_cv=0.0, ft_mean=0.3, ft_cv=0.0)
    press, release = generate_session(np.random.default_rng(0), p, 50)
    np.testing.assert_allclose(release - press, 0.12, atol=1e-12)
    c = parse(SynthConfig(n_pd=1, n_hc=1, pd_profile=p, hc_profile=p, length_mean=30))
    seq = derive_signals(c.subjects[0].sessions[0])
    np.testing.assert_allclose(seq.ht, 0.12, atol=1e-12)
    np.testing.assert_allclose(seq.ft, 0.3, atol=1e-12)


def test_moments_recovered():
    p = PhenotypeProfile(ht_mean=0.1, ht_cv=0.2, ft_mean=0.25, ft_cv=0.4, jitter_rho=0.0)
    press, release = generate_session(np.random.default_rng(0), p, 200_000)
    ht = release - press
    ft = press[1:] - release[:-1]
    assert ht.mean() == pytest.approx(0.1, rel=0.01)
    assert ht.std() / ht.mean() == pytest.approx(0.2, rel=0.02)
    assert ft.mean() == pytest.approx(0.25, rel=0.01)
    assert ft.std() / ft.mean() == pytest.approx(0.4, rel=0.03)


def test_statistic_oracle_separates_classes():
    pd = PhenotypeProfile(ht_cv=0.5)
    hc = PhenotypeProfile(ht_cv=0.15)
    c = parse(SynthConfig(pd_profile=pd, hc_profile=hc, seed=0))
    stat = per_subject_statistic(c, "ht", lambda v: np.std(v) / np.mean(v))
    assert auc_roc(scores_from_dict(stat, c.labels)) >= 0.95


def test_default_profiles_separable_at_feature_level():
    c = parse(SynthConfig(seed=0))
    assert auc_roc(scores_from_dict(per_subject_statistic(c, "ht"), c.labels)) >= 0.95


def test_fixed_text_cleaning_keeps_default_sessions():
    c = parse(SynthConfig(n_pd=3, n_hc=3), TaskKind.FIXED_TEXT)
    sig, report = preprocess_cohort(c, CleaningConfig(TaskKind.FIXED_TEXT))
    assert len(sig) == 6 and report.ok


def test_session_gap_segments():
    c = parse(SynthConfig(n_pd=1, n_hc=1, sessions_mean=1, session_gap=45.0))
    sig, _ = preprocess_cohort(c, CleaningConfig(TaskKind.FREE_TEXT), segment=True)
    assert all(len(s.sessions) == 2 for s in sig.subjects)


def test_shuffle_preserves_counts():
    c = parse(SynthConfig(n_pd=7, n_hc=5))
    s = shuffle_labels(c, 3)
    assert s.label_counts() == c.label_counts()
    assert s.subject_ids == c.subject_ids
    assert s.labels != c.labels
    assert shuffle_labels(c, 3).labels == s.labels


def test_profile_checks():
    with pytest.raises(ValueError):
        PhenotypeProfile(ht_mean=0)
    with pytest.raises(ValueError):
        PhenotypeProfile(jitter_rho=1.0)
    with pytest.raises(ValueError):
        SynthConfig(n_pd=0)
    assert SynthConfig.from_dict(SynthConfig(hc_profile=HC_PROFILE).to_dict()) == SynthConfig()
