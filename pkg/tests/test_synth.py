import json

import numpy as np
import pytest

from ttekit import synth
from ttekit.cohort import load_events, load_ontology
from ttekit.labeling import label_tte, label_visit, read_labels
from ttekit.peann import TimeGrid


def _flat_spec(n, rate, censor, seed=0, **kw):
    return synth.SynthSpec(n, 2, (0.0, 1.0), np.zeros((1, 2)), np.array([np.log(rate)]), censor, seed, **kw)


def test_single_piece_mean():
    rng = np.random.default_rng(0)
    grid = TimeGrid((0.0, 1.0))
    t = synth.sample_event_times(np.ones((100_000, 1)), grid, 1.0 - rng.random(100_000))
    assert abs(t.mean() - 1.0) < 0.02


def test_u_one_gives_zero():
    grid = TimeGrid((0.0, 1.0, 2.0))
    assert synth.sample_event_time([0.5, 1.0], grid, u=1.0) == 0.0
    assert synth.sample_event_times(np.array([[0.5, 1.0]]), grid, np.array([1.0]))[0] == 0.0


def test_scalar_and_vector_samplers_agree():
    rng = np.random.default_rng(1)
    grid = TimeGrid((0.0, 0.7, 1.5, 4.0))
    lam = rng.uniform(0.1, 2.0, size=(200, 3))
    u = 1.0 - rng.random(200)
    vec = synth.sample_event_times(lam, grid, u)
    for i in range(200):
        assert vec[i] == pytest.approx(synth.sample_event_time(lam[i], grid, u=u[i]), rel=1e-12)


def test_empirical_survival_matches_analytic():
    rng = np.random.default_rng(2)
    grid = TimeGrid((0.0, 1.0, 2.5, 4.0))
    lam = np.array([0.4, 1.1, 0.2])
    t = synth.sample_event_times(np.tile(lam, (100_000, 1)), grid, 1.0 - rng.random(100_000))
    b = np.array(grid.boundaries)
    mids = np.concatenate([(b[:-1] + b[1:]) / 2, [5.0]])
    analytic = np.exp(-grid.exposure(mids) @ lam)
    empirical = np.array([(t > m).mean() for m in mids])
    assert np.max(np.abs(empirical - analytic)) < 0.01


def test_no_censoring_limit():
    r = synth.generate(_flat_spec(10_000, 0.01, 1e-9))
    assert 1.0 - r.labels.events.mean() < 0.001


def test_censoring_half_when_rates_match():
    r = synth.generate(_flat_spec(10_000, 0.01, 0.01))
    assert abs((1.0 - r.labels.events.mean()) - 0.5) < 0.03


def test_generate_deterministic():
    spec = synth.load_spec(synth.FIXTURE_200)
    a, b = synth.generate(spec), synth.generate(spec)
    assert np.array_equal(a.labels.durations, b.labels.durations)
    assert np.array_equal(a.cohort.features, b.cohort.features)
    other = synth.generate(synth.load_spec(synth.FIXTURE_200, seed=1))
    assert not np.array_equal(a.labels.durations, other.labels.durations)


def test_round_trip_in_memory(fixture_200):
    r = fixture_200
    lab = label_tte(r.cohort, r.dag, list(r.labels.tasks))
    assert np.array_equal(lab.durations, r.labels.durations)
    assert np.array_equal(lab.events, r.labels.events)


def test_round_trip_through_files(tmp_path, fixture_200):
    r = fixture_200
    synth.write_synth(r, tmp_path)
    cohort = load_events(tmp_path / "events.jsonl")
    dag = load_ontology(tmp_path / "ontology.tsv", cohort.vocab)
    truth = read_labels(tmp_path / "labels.csv", cohort.vocab)
    lab = label_tte(cohort, dag, list(truth.tasks))
    assert np.array_equal(lab.durations, truth.durations) and np.array_equal(lab.events, truth.events)
    doc = json.loads((tmp_path / "truth.json").read_text())
    assert doc["tasks"] == r.spec.task_codes
    assert np.array_equal(np.array(doc["A"]), r.spec.A)


def test_tte_dominates_visit(fixture_200):
    r = fixture_200
    tasks = list(r.labels.tasks)
    tte = label_tte(r.cohort, r.dag, tasks).events.sum(axis=1)
    visit = label_visit(r.cohort, r.dag, tasks).events.sum(axis=1)
    assert np.all(tte >= visit)
    assert visit.sum() > 0


def test_death_censors_tasks():
    spec = _flat_spec(2000, 0.001, 0.001, death_rate=0.01)
    r = synth.generate(spec)
    deaths = np.array([p.death_time is not None for p in r.cohort.patients])
    assert deaths.mean() > 0.5
    for p, d, e in zip(r.cohort.patients, r.labels.durations[:, 0], r.labels.events[:, 0]):
        assert d <= p.censor_time - p.index_time + 1e-9


def test_spec_validation():
    with pytest.raises(ValueError):
        synth.SynthSpec(10, 2, (0.0, 1.0), np.zeros((2, 2)), np.zeros(1), 0.1)
    with pytest.raises(ValueError):
        _flat_spec(10, 0.1, 0.0)
    with pytest.raises(ValueError):
        synth.SynthSpec.from_dict({"n_patients": 3, "feature_dim": 1, "boundaries": [0, 1], "A": [[0]], "b": [0], "censor_rate": 1, "bogus": 1})


def test_spec_dict_round_trip():
    spec = synth.load_spec(synth.FIXTURE_200)
    again = synth.SynthSpec.from_dict(spec.to_dict())
    assert np.array_equal(again.A, spec.A) and np.array_equal(again.b, spec.b)
    assert again.boundaries == spec.boundaries and again.n_patients == spec.n_patients


def test_splits_cover_all(fixture_200):
    splits = fixture_200.cohort.splits
    assert set(splits) == {"train", "valid", "test"}
    assert 0.55 < (splits == "train").mean() < 0.85
