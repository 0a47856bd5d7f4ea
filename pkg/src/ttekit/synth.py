"""Synthetic cohorts drawn from known piecewise exponential hazards.

Every patient gets standard-normal features ``x``, an index time, an
exponential censoring time and, per task, an event time drawn from
``lambda(x) = exp(A x + b)`` on a fixed grid. The generator also writes the
timeline those labels imply so the labeling code can be checked against it.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .cohort import (
    Cohort,
    Event,
    OntologyDag,
    PatientTimeline,
    Vocabulary,
    write_events,
    write_features,
    write_ontology,
)
from .labeling import TaskLabelMatrix, write_labels
from .peann import TimeGrid

__all__ = [
    "SynthSpec",
    "SynthResult",
    "sample_event_time",
    "sample_event_times",
    "generate",
    "write_synth",
    "load_spec",
    "FIXTURE_200",
]

FIXTURE_200 = Path(__file__).with_name("data") / "fixture_200.json"

SCAN_CODE = "SYN/SCAN"
INDEX_VISIT = 0


@dataclass
class SynthSpec:
    n_patients: int
    feature_dim: int
    boundaries: tuple
    A: np.ndarray
    b: np.ndarray
    censor_rate: float
    seed: int = 0
    death_rate: float = 0.0
    visit_window: float = 1.0
    recur_prob: float = 0.5
    n_noise_codes: int = 4
    task_prefix: str = "SYN/T"
    split_fractions: tuple = (0.7, 0.15, 0.15)

    def __post_init__(self):
        self.grid = TimeGrid(tuple(self.boundaries))
        self.boundaries = self.grid.boundaries
        self.A = np.asarray(self.A, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        P = self.grid.n_pieces
        if self.b.ndim != 1 or len(self.b) % P:
            raise ValueError("b must hold n_tasks * n_pieces log-hazards")
        if self.A.shape != (len(self.b), self.feature_dim):
            raise ValueError(f"A must be {(len(self.b), self.feature_dim)}")
        if not self.censor_rate > 0 or self.death_rate < 0:
            raise ValueError("censor_rate must be > 0 and death_rate >= 0")
        if self.n_patients < 0:
            raise ValueError("n_patients must be >= 0")

    @property
    def n_tasks(self) -> int:
        return len(self.b) // self.grid.n_pieces

    @property
    def task_codes(self) -> list[str]:
        return [f"{self.task_prefix}{k:03d}" for k in range(self.n_tasks)]

    def hazards(self, X) -> np.ndarray:
        """``(n, K, P)`` true hazards."""
        X = np.atleast_2d(X)
        eta = X @ self.A.T + self.b
        return np.exp(eta).reshape(X.shape[0], self.n_tasks, self.grid.n_pieces)

    @classmethod
    def random(
        cls,
        n_patients: int,
        feature_dim: int,
        n_tasks: int,
        boundaries,
        base_rate: float = 1.0 / 365,
        effect_scale: float = 0.3,
        censor_rate: float = 1.0 / 730,
        seed: int = 0,
        **kwargs,
    ) -> "SynthSpec":
        """Draw ground-truth coefficients: log-rates jitter around ``base_rate``."""
        P = len(boundaries) - 1
        rng = np.random.default_rng([seed, 1])
        A = rng.normal(0.0, effect_scale, size=(n_tasks * P, feature_dim))
        b = math.log(base_rate) + rng.normal(0.0, 0.3, size=n_tasks * P)
        return cls(n_patients, feature_dim, tuple(boundaries), A, b, censor_rate, seed, **kwargs)

    def to_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "feature_dim": self.feature_dim,
            "boundaries": list(self.boundaries),
            "A": self.A.tolist(),
            "b": self.b.tolist(),
            "censor_rate": self.censor_rate,
            "seed": self.seed,
            "death_rate": self.death_rate,
            "visit_window": self.visit_window,
            "recur_prob": self.recur_prob,
            "n_noise_codes": self.n_noise_codes,
            "task_prefix": self.task_prefix,
            "split_fractions": list(self.split_fractions),
        }

    @classmethod
    def from_dict(cls, doc: dict, seed: Optional[int] = None) -> "SynthSpec":
        doc = dict(doc)
        if seed is not None:
            doc["seed"] = seed
        if "A" not in doc:
            recipe = {k: doc.pop(k) for k in ("n_tasks", "base_rate", "effect_scale") if k in doc}
            return cls.random(
                doc.pop("n_patients"),
                doc.pop("feature_dim"),
                recipe.pop("n_tasks"),
                tuple(doc.pop("boundaries")),
                seed=doc.pop("seed", 0),
                **recipe,
                **_spec_kwargs(doc),
            )
        return cls(
            doc.pop("n_patients"),
            doc.pop("feature_dim"),
            tuple(doc.pop("boundaries")),
            np.array(doc.pop("A")),
            np.array(doc.pop("b")),
            doc.pop("censor_rate"),
            doc.pop("seed", 0),
            **_spec_kwargs(doc),
        )


def _spec_kwargs(doc: dict) -> dict:
    allowed = {"censor_rate", "death_rate", "visit_window", "recur_prob", "n_noise_codes", "task_prefix", "split_fractions"}
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
    out = dict(doc)
    if "split_fractions" in out:
        out["split_fractions"] = tuple(out["split_fractions"])
    return out


def load_spec(path, seed: Optional[int] = None) -> SynthSpec:
    with open(path, encoding="utf-8") as fh:
        return SynthSpec.from_dict(json.load(fh), seed=seed)


def sample_event_time(lam, grid: TimeGrid, rng: Optional[np.random.Generator] = None, u: Optional[float] = None) -> float:
    """Inverse-CDF draw: solve ``S(t) = u`` piece by piece."""
    if u is None:
        u = 1.0 - rng.random()
    hazard_left = -math.log(u)
    b = grid.boundaries
    P = grid.n_pieces
    for p in range(P):
        width = b[p + 1] - b[p] if p < P - 1 else math.inf
        if hazard_left <= lam[p] * width:
            return b[p] + hazard_left / lam[p]
        hazard_left -= lam[p] * width
    raise AssertionError("unreachable: last piece is open-ended")


def sample_event_times(lam: np.ndarray, grid: TimeGrid, u: np.ndarray) -> np.ndarray:
    """Vectorized :func:`sample_event_time` over rows of ``lam``."""
    lam = np.asarray(lam, dtype=float)
    b = grid.array
    widths = np.diff(b)
    target = -np.log(u)
    # cumulative hazard at the start of each piece
    cum = np.concatenate([np.zeros((lam.shape[0], 1)), np.cumsum(lam[:, :-1] * widths[:-1], axis=1)], axis=1)
    piece = (cum <= target[:, None]).sum(axis=1) - 1
    rows = np.arange(lam.shape[0])
    return b[piece] + (target - cum[rows, piece]) / lam[rows, piece]


@dataclass
class SynthResult:
    spec: SynthSpec
    cohort: Cohort
    labels: TaskLabelMatrix
    dag: OntologyDag
    event_times: np.ndarray

    def truth(self) -> dict:
        doc = self.spec.to_dict()
        doc["tasks"] = self.spec.task_codes
        return doc


def _ontology(vocab: Vocabulary, spec: SynthSpec) -> OntologyDag:
    codes = spec.task_codes
    edges = []
    root = vocab.intern("SYN/ROOT")
    for k, text in enumerate(codes):
        group = vocab.intern(f"SYN/G{k // 4}")
        edges.append((vocab.intern(text), group))
        edges.append((group, root))
    noise_root = vocab.intern("SYN/NOISE")
    for j in range(spec.n_noise_codes):
        edges.append((vocab.intern(f"SYN/N{j}"), noise_root))
    nodes = {c for e in edges for c in e} | {root}
    return OntologyDag(vocab, nodes, edges)


def generate(spec: SynthSpec) -> SynthResult:
    """Draw a cohort; the returned labels are exact ground truth for ``label_tte``."""
    rng = np.random.default_rng(spec.seed)
    n, K, P = spec.n_patients, spec.n_tasks, spec.grid.n_pieces
    vocab = Vocabulary()
    task_codes = [vocab.intern(t) for t in spec.task_codes]
    scan = vocab.intern(SCAN_CODE)
    noise = [vocab.intern(f"SYN/N{j}") for j in range(spec.n_noise_codes)]
    dag = _ontology(vocab, spec)

    X = rng.standard_normal((n, spec.feature_dim))
    index = rng.uniform(0.0, 365.0, size=n)
    censor = rng.exponential(1.0 / spec.censor_rate, size=n)
    death = rng.exponential(1.0 / spec.death_rate, size=n) if spec.death_rate > 0 else np.full(n, np.inf)
    u = rng.random((n, K))
    u[u == 0.0] = np.finfo(float).tiny
    recur = rng.random((n, K)) < spec.recur_prob
    recur_gap = rng.exponential(30.0, size=(n, K))
    noise_hit = rng.random((n, spec.n_noise_codes)) < 0.5
    noise_frac = rng.random((n, spec.n_noise_codes))
    split_u = rng.random(n)

    lam = spec.hazards(X).reshape(n * K, P)
    T = sample_event_times(lam, spec.grid, u.ravel()).reshape(n, K)

    f_train, f_valid = spec.split_fractions[0], spec.split_fractions[1]
    patients = []
    durations = np.empty((n, K))
    events = np.zeros((n, K), dtype=bool)
    for i in range(n):
        idx_t = float(index[i])
        record_end = idx_t + float(censor[i])
        death_abs = idx_t + float(death[i])
        death_time = death_abs if death_abs <= record_end else None
        end = record_end if death_time is None else death_time
        evs = [Event(scan, idx_t, INDEX_VISIT)]
        for k in range(K):
            t_abs = idx_t + float(T[i, k])
            if t_abs <= idx_t:
                t_abs = math.nextafter(idx_t, math.inf)
            if t_abs <= end:
                events[i, k] = True
                durations[i, k] = t_abs - idx_t
                evs.append(Event(task_codes[k], t_abs, _visit(t_abs - idx_t, spec.visit_window)))
                again = t_abs + float(recur_gap[i, k])
                if recur[i, k] and again <= end:
                    evs.append(Event(task_codes[k], again, _visit(again - idx_t, spec.visit_window)))
            else:
                durations[i, k] = end - idx_t
        for j, code in enumerate(noise):
            if noise_hit[i, j]:
                t_abs = idx_t + float(noise_frac[i, j]) * min(end - idx_t, 730.0)
                evs.append(Event(code, t_abs, _visit(t_abs - idx_t, spec.visit_window)))
        s = split_u[i]
        split = "train" if s < f_train else ("valid" if s < f_train + f_valid else "test")
        evs.sort(key=lambda e: e.time)
        patients.append(
            PatientTimeline(
                patient_id=f"P{i:06d}",
                events=tuple(evs),
                record_end=record_end,
                index_time=idx_t,
                death_time=death_time,
                index_visit_id=INDEX_VISIT,
                split=split,
            )
        )
    cohort = Cohort(tuple(patients), vocab, X)
    labels = TaskLabelMatrix(tuple(task_codes), tuple(cohort.patient_ids), durations, events, "tte")
    return SynthResult(spec, cohort, labels, dag, T)


def _visit(offset: float, window: float) -> int:
    # visits: 0 is the index visit, later ones numbered by 30-day block
    return INDEX_VISIT if offset <= window else 1 + int(offset // 30.0)


def write_synth(result: SynthResult, out_dir) -> None:
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    write_events(result.cohort, out / "events.jsonl", out / "patients.jsonl")
    write_features(out / "features.csv", result.cohort.patient_ids, result.cohort.features)
    write_labels(result.labels, out / "labels.csv")
    write_ontology(result.dag, out / "ontology.tsv")
    with open(out / "truth.json", "w", encoding="utf-8") as fh:
        json.dump(result.truth(), fh, indent=1)
        fh.write("\n")
