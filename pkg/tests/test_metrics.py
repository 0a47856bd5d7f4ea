import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttekit import metrics
from ttekit.metrics import UndefinedMetricError

from oracles import harrell_pairs, ibs_direct, km_product_limit


def test_harrell_examples(backend):
    assert metrics.harrells_c([3, 2, 1], durations=[1, 2, 3], events=[1, 1, 1]) == 1.0
    assert metrics.harrells_c([1, 1, 1], durations=[1, 2, 3], events=[1, 1, 1]) == 0.5
    assert metrics.harrells_c([3, 1, 2], durations=[1, 2, 3], events=[1, 0, 1]) == 1.0
    assert harrell_pairs([1, 2, 3], [1, 0, 1], [3, 1, 2]) == (2.0, 2)


def test_harrell_no_comparable_pairs():
    with pytest.raises(UndefinedMetricError):
        metrics.harrells_c([1, 2], durations=[1, 2], events=[0, 0])


def test_harrell_equals_brute_force(backend):
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(2, 21))
        t = rng.integers(0, 6, size=n).astype(float)
        e = rng.random(n) < 0.6
        r = rng.integers(0, 4, size=n).astype(float)
        num, comp = harrell_pairs(t, e, r)
        if comp == 0:
            continue
        assert metrics.harrells_c(r, durations=t, events=e) == num / comp


def test_km_examples():
    km = metrics.kaplan_meier(durations=[1, 2, 3], events=[1, 1, 1])
    np.testing.assert_allclose(km([1, 2, 3]), [2 / 3, 1 / 3, 0.0], rtol=1e-15)
    single = metrics.kaplan_meier(durations=[4.0], events=[0])
    assert single([0.0, 4.0, 100.0]).tolist() == [1.0, 1.0, 1.0]
    cens = metrics.kaplan_meier(durations=[1, 2, 3], events=[1, 0, 1])
    assert cens(1.0) == pytest.approx(2 / 3) and cens(3.0) == 0.0
    assert cens.left(1.0) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.booleans()), min_size=1, max_size=25))
def test_km_product_limit(rows):
    t = [float(a) for a, _ in rows]
    e = [b for _, b in rows]
    km = metrics.kaplan_meier(durations=t, events=e)
    for q in np.arange(-0.5, 9.0, 0.5):
        assert km(q) == pytest.approx(km_product_limit(t, e, q), abs=1e-12)
    s = km(np.arange(0, 9.0))
    assert np.all(np.diff(s) <= 0) and np.all((s >= 0) & (s <= 1))


def test_km_uncensored_is_empirical():
    rng = np.random.default_rng(4)
    t = rng.integers(0, 30, size=200).astype(float)
    km = metrics.kaplan_meier(durations=t, events=np.ones(200, bool))
    q = np.arange(-1, 31, 0.5)
    np.testing.assert_allclose(km(q), [(t > x).mean() for x in q], atol=1e-12)


def test_td_c_perfect_and_random():
    t = np.arange(1.0, 51.0)
    assert metrics.td_c_statistic(-t, durations=t, events=np.ones(50, bool)) == 1.0
    rng = np.random.default_rng(1)
    T = rng.exponential(size=2000)
    c = metrics.td_c_statistic(rng.random(2000), durations=T, events=np.ones(2000, bool))
    assert abs(c - 0.5) < 0.03


def test_td_c_single_event_time():
    d = np.array([1.0, 2.0, 3.0, 4.0])
    e = np.array([False, True, False, False])
    r = np.array([0.3, 0.5, 0.9, 0.1])
    times, auc = metrics.time_dependent_auc(r, durations=d, events=e)
    assert times.tolist() == [2.0]
    assert metrics.td_c_statistic(r, durations=d, events=e) == auc[0] == 0.5


def test_td_c_equals_harrell_without_censoring():
    # with distinct times and no censoring the KM weights make the two coincide
    rng = np.random.default_rng(2)
    for _ in range(10):
        n = 60
        t = rng.permutation(n).astype(float) + 1
        r = rng.normal(size=n)
        a = metrics.td_c_statistic(r, durations=t, events=np.ones(n, bool))
        b = metrics.harrells_c(r, durations=t, events=np.ones(n, bool))
        assert a == pytest.approx(b, abs=1e-12)


def test_td_c_time_varying_risk():
    t = np.array([1.0, 2.0, 3.0])
    e = np.ones(3, bool)

    def risk(times):
        # at each time, the patient failing then ranks highest
        return np.array([[1.0 if t[i] == s else 0.0 for s in times] for i in range(3)])

    assert metrics.td_c_statistic(risk, durations=t, events=e) == 1.0


def test_ibs_examples():
    t = np.array([1.0, 2.0, 3.0, 4.0])
    e = np.ones(4, bool)
    grid = np.linspace(0.0, 4.0, 100)
    oracle = (grid[None, :] < t[:, None]).astype(float)
    assert metrics.integrated_brier(oracle, durations=t, events=e, horizon=4.0) == 0.0
    half = np.full((4, 100), 0.5)
    assert metrics.integrated_brier(half, durations=t, events=e, horizon=4.0) == pytest.approx(0.25, abs=1e-15)
    bs = metrics.brier_score(np.full(4, 0.5), durations=t, events=e, t=2.5)
    assert bs == pytest.approx(0.25)


def test_ibs_matches_direct_summation(caplog):
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(5, 25))
        t = np.round(rng.uniform(0.1, 10, size=n), 1)
        e = rng.random(n) < 0.7
        horizon = float(np.quantile(t, 0.8))
        grid = np.linspace(0.0, horizon, 100)
        S = np.exp(-np.outer(rng.uniform(0.05, 0.5, size=n), grid))
        got = metrics.integrated_brier(S, durations=t, events=e, horizon=horizon)
        want = ibs_direct(S, t, e, grid)
        assert got == pytest.approx(want, abs=1e-10)


def test_ibs_callable_equals_matrix():
    rng = np.random.default_rng(5)
    t = rng.uniform(1, 10, size=30)
    e = rng.random(30) < 0.6
    rate = rng.uniform(0.1, 0.3, size=30)
    grid = np.linspace(0, 8.0, 100)
    a = metrics.integrated_brier(lambda s: np.exp(-np.outer(rate, s)), durations=t, events=e, horizon=8.0)
    b = metrics.integrated_brier(np.exp(-np.outer(rate, grid)), durations=t, events=e, horizon=8.0)
    assert a == b


def test_ibs_truncates_when_censoring_survival_hits_zero(caplog):
    t = np.array([1.0, 2.0, 3.0])
    e = np.array([True, True, False])
    with caplog.at_level(logging.WARNING):
        value = metrics.integrated_brier(np.full((3, 100), 0.5), durations=t, events=e, horizon=3.0)
    assert np.isfinite(value) and "truncating" in caplog.text


def test_auroc_examples():
    assert metrics.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert metrics.auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert metrics.auroc([0.3] * 4, [0, 1, 0, 1]) == 0.5
    with pytest.raises(UndefinedMetricError):
        metrics.auroc([0.1, 0.2], [1, 1])


def test_auroc_random_baseline():
    rng = np.random.default_rng(6)
    assert abs(metrics.auroc(rng.random(2000), rng.random(2000) < 0.5) - 0.5) < 0.03


def test_bootstrap_constant_collapses():
    rep = metrics.bootstrap(lambda idx: 0.7, 50, n_boot=100)
    assert rep.ci_low == rep.estimate == rep.ci_high == 0.7


def test_bootstrap_deterministic_and_thread_independent():
    rng = np.random.default_rng(7)
    x = rng.normal(size=80)
    a = metrics.bootstrap(lambda idx: float(x[idx].mean()), 80, n_boot=200, seed=5, threads=1)
    b = metrics.bootstrap(lambda idx: float(x[idx].mean()), 80, n_boot=200, seed=5, threads=4)
    assert a.to_dict() == b.to_dict()
    assert np.array_equal(a.samples, b.samples)
    assert a.point == pytest.approx(x.mean())


def test_bootstrap_default_replicates():
    assert metrics.N_BOOT == 1000
    assert metrics.bootstrap(lambda idx: float(idx.mean()), 10).n_boot == 1000


def test_bootstrap_too_many_undefined():
    def metric(idx):
        if idx[0] % 3:
            raise UndefinedMetricError("nope")
        return 1.0

    with pytest.raises(UndefinedMetricError):
        metrics.bootstrap(metric, 30, n_boot=100)


def test_bootstrap_ci_width_scaling():
    rng = np.random.default_rng(8)
    widths = []
    for n in (100, 400):
        x = rng.normal(size=n)
        rep = metrics.bootstrap(lambda idx: float(x[idx].mean()), n, n_boot=400, seed=1)
        widths.append(rep.ci_high - rep.ci_low)
    ratio = widths[0] / widths[1]
    assert 1.0 < ratio < 4.0  # ~2 expected


def _report(samples, name="m"):
    s = np.asarray(samples, dtype=float)
    return metrics.MetricReport(name, float(s.mean()), float(s.min()), float(s.max()), len(s), float(s.mean()), 0, s)


def test_z_test_cases():
    rng = np.random.default_rng(9)
    a = rng.normal(size=500)
    assert metrics.z_test(_report(a), _report(a)) == 1.0
    far = _report(a + 10 * a.std() * np.sqrt(2))
    assert metrics.z_test(_report(a), far) < 1e-10
    b = _report(rng.normal(0.1, 1, size=500))
    assert metrics.z_test(_report(a), b) == metrics.z_test(b, _report(a))
    assert metrics.z_test(_report([1.0, 1.0]), _report([1.0, 1.0])) == 1.0
    assert metrics.z_test(_report([1.0, 1.0]), _report([2.0, 2.0])) == 0.0


def test_report_and_km_files(tmp_path):
    rep = metrics.bootstrap(lambda idx: 0.5, 5, n_boot=10, name="x")
    metrics.write_report(tmp_path / "r.json", [rep], [{"a": "x", "b": "x", "p_value": 1.0}])
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["metrics"][0]["name"] == "x" and doc["z_tests"][0]["p_value"] == 1.0
    km = metrics.kaplan_meier(durations=[1, 2, 3], events=[1, 0, 1])
    metrics.write_km(km, tmp_path / "km.csv")
    lines = (tmp_path / "km.csv").read_text().splitlines()
    assert lines[1] == "0.0,1.0,3,0"


def test_km_uncensored_bit_exact():
    rng = np.random.default_rng(10)
    for n in (3, 7, 30, 999):
        t = rng.integers(0, 50, size=n).astype(float)
        km = metrics.kaplan_meier(durations=t, events=np.ones(n, bool))
        assert km.survival.tolist() == [float(np.sum(t > u)) / n for u in km.times]


def test_quiet_replicates_still_truncate(caplog):
    t = np.array([1.0, 2.0, 3.0])
    e = np.array([True, True, False])
    S = np.full((3, 100), 0.5)
    with caplog.at_level(logging.WARNING):
        rep = metrics.bootstrap(lambda idx: metrics.integrated_brier(S[idx], durations=t[idx], events=e[idx], horizon=3.0), 3, n_boot=50)
    assert np.all(np.isfinite(rep.samples))
    assert caplog.text.count("truncating") == 1
