import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttekit.cohort import Cohort, Event, OntologyDag, PatientTimeline, Vocabulary
from ttekit.labeling import (
    DEATH_CODE,
    TaskLabelMatrix,
    TteLabel,
    binarize_horizon,
    label_density,
    label_mtl,
    label_tte,
    label_visit,
    read_labels,
    write_horizon_labels,
    write_labels,
)


def _cohort(specs, edges=()):
    """specs: list of dicts with events [(code, time, visit)], index, end, death, visit."""
    vocab = Vocabulary()
    patients = []
    for i, s in enumerate(specs):
        evs = tuple(Event(vocab.intern(c), float(t), v) for c, t, v in s.get("events", ()))
        patients.append(PatientTimeline(
            f"p{i}", evs, s.get("end", 500.0), s.get("index", 100.0), s.get("death"), s.get("visit"),
        ))
    pairs = [(vocab.intern(c), vocab.intern(p)) for c, p in edges]
    dag = OntologyDag(vocab, {x for e in pairs for x in e}, pairs)
    return Cohort(tuple(patients), vocab), dag, vocab


def test_first_occurrence_after_index():
    cohort, dag, v = _cohort([{"events": [("X", 50, None), ("X", 130, None)]}])
    lab = label_tte(cohort, dag, [v["X"]])
    assert (lab.durations[0, 0], lab.events[0, 0]) == (30.0, True)


def test_never_occurs_is_censored():
    cohort, dag, v = _cohort([{"events": []}])
    X = v.intern("X")
    lab = label_tte(cohort, dag, [X])
    assert (lab.durations[0, 0], lab.events[0, 0]) == (400.0, False)


def test_death_censors_later_events():
    cohort, dag, v = _cohort([{"events": [("Y", 300, None)], "death": 250.0}])
    lab = label_tte(cohort, dag, [v["Y"]])
    assert (lab.durations[0, 0], lab.events[0, 0]) == (150.0, False)


def test_event_at_index_not_counted():
    cohort, dag, v = _cohort([{"events": [("X", 100, None)]}])
    lab = label_tte(cohort, dag, [v["X"]])
    assert not lab.events[0, 0]


def test_ancestor_task_fires_on_descendant():
    cohort, dag, v = _cohort([{"events": [("leaf", 120, None)]}], edges=[("leaf", "mid"), ("mid", "top")])
    lab = label_tte(cohort, dag, [v["top"], v["mid"], v["leaf"]])
    assert lab.events[0].tolist() == [True, True, True]
    assert lab.durations[0].tolist() == [20.0, 20.0, 20.0]


def test_death_task():
    cohort, dag, v = _cohort([{"death": 250.0}, {}])
    lab = label_tte(cohort, dag, [v.intern(DEATH_CODE)])
    assert lab.label(0, 0) == TteLabel(150.0, True)
    assert lab.label(1, 0) == TteLabel(400.0, False)


def test_unseen_task_warns(caplog):
    cohort, dag, v = _cohort([{}])
    with caplog.at_level(logging.WARNING):
        lab = label_tte(cohort, dag, [v.intern("ghost")])
    assert "ghost" in caplog.text
    assert not lab.events.any()


def test_visit_labels():
    specs = [
        {"events": [("X", 100.5, 7)], "visit": 7},
        {"events": [("X", 300, 9)], "visit": 7},
        {"events": []},
        # no visit ids: falls back to the one-day window
        {"events": [("X", 100.9, None)]},
    ]
    cohort, dag, v = _cohort(specs)
    lab = label_visit(cohort, dag, [v["X"]])
    assert lab.events[:, 0].tolist() == [True, False, False, True]
    assert (lab.durations == 0).all()


def test_mtl_is_presence():
    cohort, dag, v = _cohort([{"events": [("X", 400, None)]}, {}])
    lab = label_mtl(cohort, dag, [v["X"]])
    assert lab.events[:, 0].tolist() == [True, False] and lab.mode == "mtl"


def _matrix(rows):
    v = Vocabulary()
    d = np.array([[r[0]] for r in rows], dtype=float)
    e = np.array([[r[1]] for r in rows], dtype=bool)
    return TaskLabelMatrix((v.intern("T"),), tuple(f"p{i}" for i in range(len(rows))), d, e, "tte")


def test_binarize_horizon():
    h = binarize_horizon(_matrix([(30, True), (400, False), (100, False)]), 183)
    assert [h.value(i, 0) for i in range(3)] == [True, False, None]


def test_binarize_bad_horizon():
    with pytest.raises(ValueError):
        binarize_horizon(_matrix([(30, True)]), 0)


def test_density_examples():
    assert label_density(_matrix([(1, False), (2, False)])).cdf == [(0, 1.0)]
    v = Vocabulary()
    ev = np.array([[True, False, False], [True, True, True]])
    m = TaskLabelMatrix(tuple(v.intern(t) for t in "abc"), ("p0", "p1"), np.ones((2, 3)), ev, "tte")
    assert label_density(m).cdf == [(1, 0.5), (3, 1.0)]


def test_labels_csv_round_trip(tmp_path, fixture_200):
    lab = fixture_200.labels
    write_labels(lab, tmp_path / "l.csv")
    back = read_labels(tmp_path / "l.csv")
    assert back.patient_ids == lab.patient_ids
    assert [c.text for c in back.tasks] == [c.text for c in lab.tasks]
    assert (back.durations == lab.durations).all() and (back.events == lab.events).all()


def test_horizon_file_drops_excluded(tmp_path):
    m = _matrix([(30, True), (400, False), (100, False)])
    write_horizon_labels(binarize_horizon(m, 183), m, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[1:] == ["p0,T,30.0,1,183.0", "p1,T,400.0,0,183.0"]


def test_threads_do_not_change_labels(fixture_200):
    r = fixture_200
    tasks = list(r.labels.tasks)
    one = label_tte(r.cohort, r.dag, tasks, threads=1)
    many = label_tte(r.cohort, r.dag, tasks, threads=7)
    assert (one.durations == many.durations).all() and (one.events == many.events).all()


timeline = st.lists(
    st.tuples(st.sampled_from("ABC"), st.floats(0, 600, allow_nan=False), st.one_of(st.none(), st.integers(0, 3))),
    max_size=12,
)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(timeline, st.floats(100, 700), st.one_of(st.none(), st.floats(100, 700))), min_size=1, max_size=5))
def test_tte_invariants(rows):
    specs = []
    for evs, end, death in rows:
        if death is not None and death > end:
            death = end
        specs.append({"events": evs, "end": end, "death": death, "visit": 0})
    cohort, dag, v = _cohort(specs, edges=[("A", "B")])
    tasks = [v.intern(c) for c in "ABC"]
    lab = label_tte(cohort, dag, tasks)
    for i, p in enumerate(cohort.patients):
        follow = p.censor_time - p.index_time
        assert np.all(lab.durations[i] >= 0) and np.all(lab.durations[i] <= follow)
        # censored labels sit exactly at the end of follow-up
        assert np.all(lab.durations[i][~lab.events[i]] == follow)
        # B is A's parent, so B fires no later than A
        if lab.events[i, 0]:
            assert lab.events[i, 1] and lab.durations[i, 1] <= lab.durations[i, 0]
