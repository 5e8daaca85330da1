import numpy as np
import pytest

from kdscreen.ingest import (DUPLICATE_ID, EMPTY, INVALID_TIMESTAMP, NEGATIVE_HOLD, RAGGED,
                             UNSORTED, Cohort, IngestError, Subject, TaskKind, parse_event_log,
                             parse_labels, parse_signal_channels, parse_signal_log,
                             validate_cohort, write_event_log, write_labels, write_signal_log)
from kdscreen.signals import CleaningConfig, preprocess_cohort
from kdscreen.synth import SynthConfig, generate_cohort

from conftest import make_session

HEAD = "subject_id,session_id,key_id,press_ts,release_ts\n"


def test_minimal_event_log():
    c = parse_event_log(HEAD + "a,1,x,0.0,0.1\na,1,y,0.3,0.45\n", "fixed_text")
    assert len(c) == 1
    assert len(c.subjects[0].sessions) == 1
    assert len(c.subjects[0].sessions[0]) == 2
    assert c.report.ok


def test_negative_hold_rejects_row_only():
    c = parse_event_log(HEAD + "a,1,x,0.0,0.1\na,1,y,0.3,0.2\na,1,z,0.5,0.6\n", "free_text")
    sess = c.subjects[0].sessions[0]
    assert len(sess) == 2
    assert c.report.reasons[NEGATIVE_HOLD] == 1
    assert c.report.accepted_rows + c.report.rejected_rows == 3


def test_schema_errors_name_line():
    with pytest.raises(IngestError, match="line 1"):
        parse_event_log("subject_id,session_id,key_id,press_ts\n", "free_text")
    with pytest.raises(IngestError, match="line 3"):
        parse_event_log(HEAD + "a,1,x,0.0,0.1\na,1,y,abc,0.2\n", "free_text")


def test_invalid_timestamp_counted():
    c = parse_event_log(HEAD + "a,1,x,-1.0,0.1\na,1,y,0.3,0.4\na,1,z,inf,0.4\n", "free_text")
    assert c.report.reasons[INVALID_TIMESTAMP] == 2
    assert len(c.subjects[0].sessions[0]) == 1


def test_events_sorted_and_subject_order_kept():
    text = HEAD + "b,1,x,0.5,0.6\nb,1,y,0.1,0.2\na,1,z,0.0,0.1\na,1,w,0.2,0.3\n"
    c = parse_event_log(text, "free_text")
    assert c.subject_ids == ["b", "a"]
    np.testing.assert_array_equal(c.subjects[0].sessions[0].press, [0.1, 0.5])
    assert c.subjects[0].sessions[0].key_ids == ("y", "x")


def test_db3_shaped_counts():
    labels = {f"p{i}": 1 for i in range(57)} | {f"h{i}": 0 for i in range(46)}
    rows = "".join(f"{s},1,k,0.0,0.1\n{s},1,k,0.3,0.4\n" for s in labels)
    c = parse_event_log(HEAD + rows, "fixed_text", labels)
    assert len(c) == 103
    assert c.label_counts() == {1: 57, 0: 46}


def test_signal_log_rebuilds_rr():
    c = parse_signal_log("subject_id,session_id,step,ht,ft,pp,rr\na,1,0,0.1,0.2,0.3,\n")
    seq = c.subjects[0].sessions[0]
    assert seq.rr[0] == pytest.approx(0.3, abs=1e-15)
    c2 = parse_signal_log("subject_id,session_id,step,ht,ft,pp\na,1,0,0.1,0.2,0.3\n")
    assert c2.subjects[0].sessions[0].rr[0] == pytest.approx(0.3, abs=1e-15)


def test_ragged_signal_session_rejected():
    rows = ["a,1,%d,0.1,0.2,0.3," % i for i in range(5)]
    rows[4] = "a,1,4,0.1,,0.3,"  # ht length 5, ft length 4
    rows += ["a,2,0,0.1,0.2,0.3,"]
    c = parse_signal_log("subject_id,session_id,step,ht,ft,pp,rr\n" + "\n".join(rows) + "\n")
    assert c.report.reasons[RAGGED] == 1
    assert [s.session_id for s in c.subjects[0].sessions] == ["2"]
    with pytest.raises(IngestError):
        parse_signal_channels("a", "1", [0.1] * 5, [0.2] * 4, [0.3] * 5)


def test_signal_label_counts_230():
    labels = {f"p{i}": 1 for i in range(100)} | {f"h{i}": 0 for i in range(130)}
    rows = "".join(f"{s},1,0,0.1,0.2,0.3,0.3\n" for s in labels)
    c = parse_signal_log("subject_id,session_id,step,ht,ft,pp,rr\n" + rows, labels)
    assert c.label_counts() == {1: 100, 0: 130}


def test_validate_cohort_cases():
    s = make_session([0.0, 0.3], [0.1, 0.4], sid="a")
    good = Cohort((Subject("a", 1, (s,)),))
    assert validate_cohort(good).ok
    dup = Cohort((Subject("a", 1, (s,)), Subject("a", 0, (s,))))
    assert validate_cohort(dup).reasons[DUPLICATE_ID] == 1
    unsorted = make_session([0.3, 0.0], [0.4, 0.1], sid="a")
    r = validate_cohort(Cohort((Subject("a", 1, (unsorted,)),)))
    assert r.reasons[UNSORTED] == 1
    assert r.accepted_sessions + r.rejected_sessions == r.total_sessions


def test_empty_session_reported():
    c = parse_event_log(HEAD + "a,1,x,0.0,0.1\na,2,y,-5,0.1\n", "free_text")
    assert c.report.reasons[EMPTY] == 1
    assert c.report.accepted_sessions + c.report.rejected_sessions == c.report.total_sessions


def test_labels_parser():
    assert parse_labels("subject_id,label\na,1\nb,0\n") == {"a": 1, "b": 0}
    with pytest.raises(IngestError, match="line 2"):
        parse_labels("subject_id,label\na,2\n")


def test_path_sources(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text("subject_id,label\na,1\n")
    assert parse_labels(p) == {"a": 1}


def test_event_round_trip():
    ev, lab = generate_cohort(SynthConfig(n_pd=3, n_hc=2, sessions_mean=2, length_mean=30, seed=4))
    c = parse_event_log(ev, "free_text", lab)
    again = parse_event_log(write_event_log(c), "free_text", parse_labels(write_labels(c)))
    assert c == again
    assert write_event_log(again) == write_event_log(c)


def test_signal_round_trip():
    ev, lab = generate_cohort(SynthConfig(n_pd=2, n_hc=2, sessions_mean=2, length_mean=30, seed=5))
    sig, _ = preprocess_cohort(parse_event_log(ev, "free_text", lab), CleaningConfig(TaskKind.FREE_TEXT))
    back = parse_signal_log(write_signal_log(sig), lab)
    assert back == sig


def test_row_conservation(rng):
    lines = []
    for i in range(300):
        p = rng.uniform(0, 10)
        r = p + rng.normal(0.05, 0.1)
        lines.append(f"s{i % 7},{i % 3},k,{p!r},{r!r}")
    c = parse_event_log(HEAD + "\n".join(lines) + "\n", "free_text")
    rep = c.report
    assert rep.accepted_rows + rep.rejected_rows == 300
    assert sum(len(s) for _, s in c.sessions()) == rep.accepted_rows
