import itertools
import logging
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttekit.cohort import Cohort, Event, OntologyDag, PatientTimeline, Vocabulary
from ttekit.task_selection import (
    CodeStats,
    code_entropy,
    compute_code_stats,
    read_tasks,
    select_greedy_cover,
    select_rank_entropy,
    select_tasks,
    write_tasks,
)


def _entropy_ref(p):
    return 0.0 if p in (0.0, 1.0) else -(p * math.log(p) + (1 - p) * math.log(1 - p))


def test_entropy_values():
    assert code_entropy(0.5) == pytest.approx(0.693147, abs=5e-7)
    assert code_entropy(0.0) == 0.0 and code_entropy(1.0) == 0.0
    assert code_entropy(0.25) == pytest.approx(0.562335, abs=5e-7)


@pytest.mark.parametrize("p", [-0.1, 1.5, float("nan")])
def test_entropy_domain(p):
    with pytest.raises(ValueError):
        code_entropy(p)


@given(st.floats(0, 1))
def test_entropy_matches_formula(p):
    assert code_entropy(p) == pytest.approx(_entropy_ref(p), abs=1e-12)
    assert code_entropy(p) == pytest.approx(code_entropy(1.0 - p), abs=1e-15)


@given(st.integers(1, 10_000), st.data())
def test_count_entropy_ties_exactly(n, data):
    k = data.draw(st.integers(0, n))
    v = Vocabulary()
    a = CodeStats(v.intern("a"), k / n, 1, n_patients=n)
    b = CodeStats(v.intern("b"), (n - k) / n, 1, n_patients=n)
    assert a.entropy == b.entropy


def _stats(vocab, rows):
    """rows: (text, presence_set, n_patients, raw_count)"""
    return [CodeStats(vocab.intern(t), len(s) / n, c, frozenset(s), n) for t, s, n, c in rows]


def test_rank_entropy_example():
    v = Vocabulary()
    stats = [CodeStats(v.intern("a"), 0.5, 1), CodeStats(v.intern("b"), 0.9, 1), CodeStats(v.intern("c"), 0.01, 1)]
    assert [c.text for c in select_rank_entropy(stats, 2)] == ["a", "b"]


def test_rank_entropy_budget_exceeds(caplog):
    v = Vocabulary()
    stats = [CodeStats(v.intern("a"), 0.1, 1), CodeStats(v.intern("b"), 0.5, 1)]
    with caplog.at_level(logging.WARNING):
        out = select_rank_entropy(stats, 5)
    assert [c.text for c in out] == ["b", "a"]
    assert "budget" in caplog.text


def test_tie_rule():
    v = Vocabulary()
    stats = [CodeStats(v.intern("z"), 0.3, 5), CodeStats(v.intern("y"), 0.3, 9), CodeStats(v.intern("x"), 0.3, 5)]
    assert [c.text for c in select_rank_entropy(stats, 3)] == ["y", "x", "z"]


def test_greedy_cover_example():
    v = Vocabulary()
    A, B, C, D = (v.intern(t) for t in "ABCD")
    dag = OntologyDag(v, {A, B, C, D}, [(C, B), (B, A)])
    n = 10
    stats = _stats(v, [
        ("A", range(5), n, 12),
        ("B", range(5), n, 10),
        ("C", range(1), n, 1),
        ("D", range(3, 6), n, 3),
    ])
    out = select_greedy_cover(stats, dag, budget=2, redundancy_theta=0.9)
    assert [c.text for c in out] == ["A", "D"]


def test_greedy_cover_empty():
    v = Vocabulary()
    assert select_greedy_cover([], OntologyDag(v, (), ()), 3) == []


def test_unknown_strategy():
    with pytest.raises(ValueError):
        select_tasks([], None, 3, "nope")


def _random_problem(rng, n_codes):
    v = Vocabulary()
    codes = [v.intern(f"c{i}") for i in range(n_codes)]
    edges = [(codes[i], codes[int(rng.integers(0, i))]) for i in range(1, n_codes) if rng.random() < 0.6]
    dag = OntologyDag(v, set(codes), edges)
    n_pat = int(rng.integers(3, 9))
    stats = []
    seen = set()
    for c in codes:
        # presence drawn from a small pool so entropy ties happen often
        pres = frozenset(int(i) for i in np.flatnonzero(rng.random(n_pat) < rng.choice([0.2, 0.5, 0.8])))
        stats.append(CodeStats(c, len(pres) / n_pat, int(rng.integers(0, 4)), pres, n_pat))
        seen.add(pres)
    return stats, dag


def _exact_q(s):
    # entropy is increasing in min(p, 1 - p), so this exact fraction orders codes like H does
    k = len(s.presence)
    return Fraction(min(k, s.n_patients - k), s.n_patients)


def _exhaustive_top_k(stats, k):
    best = None
    for combo in itertools.combinations(stats, min(k, len(stats))):
        key = sorted((-_exact_q(s), -s.raw_count, s.code.text) for s in combo)
        if best is None or key < best[0]:
            best = (key, combo)
    return sorted(s.code.text for s in best[1])


def test_rank_entropy_matches_exhaustive():
    rng = np.random.default_rng(7)
    for trial in range(300):
        n_codes = int(rng.integers(1, 11))
        stats, _ = _random_problem(rng, n_codes)
        k = int(rng.integers(1, n_codes + 1))
        got = sorted(c.text for c in select_rank_entropy(stats, k))
        assert got == _exhaustive_top_k(stats, k)
        best = sum(sorted((_entropy_ref(s.patient_presence) for s in stats), reverse=True)[:k])
        chosen = {c.text for c in select_rank_entropy(stats, k)}
        total = sum(_entropy_ref(s.patient_presence) for s in stats if s.code.text in chosen)
        assert total == pytest.approx(best, abs=1e-12)


def test_greedy_theta_one_equals_rank():
    rng = np.random.default_rng(11)
    checked = 0
    for trial in range(300):
        stats, dag = _random_problem(rng, int(rng.integers(1, 11)))
        sets = [s.presence for s in stats]
        if len(set(sets)) < len(sets):
            continue  # exact duplicates would be pruned at theta = 1
        k = int(rng.integers(1, len(stats) + 1))
        assert select_greedy_cover(stats, dag, k, 1.0) == select_rank_entropy(stats, k)
        checked += 1
    assert checked > 50


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_greedy_picks_are_not_jointly_redundant(seed, theta):
    stats, dag = _random_problem(np.random.default_rng(seed), 8)
    by_code = {s.code: s for s in stats}
    picked = select_greedy_cover(stats, dag, 8, theta)
    assert len(set(picked)) == len(picked)
    for a, b in itertools.combinations(picked, 2):
        if dag.is_related(a, b):
            sa, sb = by_code[a].presence, by_code[b].presence
            union = sa | sb
            jac = len(sa & sb) / len(union) if union else 1.0
            assert jac < theta


def test_code_stats_closure_and_window():
    v = Vocabulary()
    leaf, top = v.intern("leaf"), v.intern("top")
    dag = OntologyDag(v, {leaf, top}, [(leaf, top)])
    patients = (
        PatientTimeline("a", (Event(leaf, 5.0), Event(leaf, 20.0), Event(leaf, 200.0)), 100.0, 10.0),
        PatientTimeline("b", (Event(top, 10.0),), 100.0, 10.0),
        PatientTimeline("c", (Event(leaf, 50.0),), 100.0, 10.0, split="test"),
    )
    stats = {s.code.text: s for s in compute_code_stats(Cohort(patients, v), dag)}
    # only patient a's event at 20 counts: 5 and 10 are not after index, 200 is past record end
    assert stats["leaf"].raw_count == 1 and stats["leaf"].patient_presence == 0.5
    assert stats["top"].raw_count == 1 and stats["top"].presence == frozenset({0})


def test_selection_deterministic_across_threads(fixture_200):
    r = fixture_200
    outs = set()
    for threads in (1, 2, 8):
        stats = compute_code_stats(r.cohort, r.dag, threads=threads)
        for strategy in ("rank-entropy", "greedy-cover"):
            outs.add((strategy, tuple(c.text for c in select_tasks(stats, r.dag, 6, strategy))))
    assert len(outs) == 2


def test_tasks_file_round_trip(tmp_path):
    v = Vocabulary()
    tasks = [v.intern("SYN/T000"), v.intern("Death")]
    write_tasks(tasks, tmp_path / "t.txt")
    assert read_tasks(tmp_path / "t.txt", v) == tasks
