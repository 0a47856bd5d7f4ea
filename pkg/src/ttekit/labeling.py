"""Turn patient timelines into survival labels.

Four supervision regimes are produced from the same timelines:

* ``tte``: time until the first task-matching event strictly after the index
  time, censored at the end of record or at death.
* ``visit``: whether a task-matching event falls in the index visit.
* horizon-binarized TTE labels (1/6/12 month classification targets).
* ``mtl``: present/absent anywhere after index, ignoring timing.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .cohort import CodeId, Cohort, OntologyDag, PatientTimeline

logger = logging.getLogger(__name__)

__all__ = [
    "DEATH_CODE",
    "HORIZONS",
    "TteLabel",
    "TaskLabelMatrix",
    "HorizonLabels",
    "LabelDensity",
    "label_tte",
    "label_visit",
    "label_mtl",
    "binarize_horizon",
    "label_density",
    "write_labels",
    "read_labels",
    "write_horizon_labels",
]

DEATH_CODE = "Death"
HORIZONS = {"1M": 30.0, "6M": 183.0, "12M": 365.0}
DEFAULT_VISIT_WINDOW = 1.0


@dataclass(frozen=True)
class TteLabel:
    duration: float
    event: bool

    def __post_init__(self):
        if not (self.duration >= 0 and math.isfinite(self.duration)):
            raise ValueError(f"duration must be finite and >= 0, got {self.duration}")


@dataclass(frozen=True)
class TaskLabelMatrix:
    """Dense labels, one row per patient and one column per task."""

    tasks: tuple[CodeId, ...]
    patient_ids: tuple[str, ...]
    durations: np.ndarray
    events: np.ndarray
    mode: str = "tte"

    def __post_init__(self):
        d = np.asarray(self.durations, dtype=float)
        e = np.asarray(self.events, dtype=bool)
        shape = (len(self.patient_ids), len(self.tasks))
        if d.shape != shape or e.shape != shape:
            raise ValueError(f"label arrays must have shape {shape}, got {d.shape} / {e.shape}")
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise ValueError("durations must be finite and >= 0")
        d.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "durations", d)
        object.__setattr__(self, "events", e)

    @property
    def n_patients(self) -> int:
        return len(self.patient_ids)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def label(self, patient: int, task: int) -> TteLabel:
        return TteLabel(float(self.durations[patient, task]), bool(self.events[patient, task]))

    def column(self, task: int) -> list[TteLabel]:
        return [self.label(i, task) for i in range(self.n_patients)]

    def task_index(self, text: str) -> int:
        for k, c in enumerate(self.tasks):
            if c.text == text:
                return k
        raise KeyError(text)

    def subset(self, rows) -> "TaskLabelMatrix":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return TaskLabelMatrix(
            self.tasks,
            tuple(self.patient_ids[i] for i in rows),
            self.durations[rows],
            self.events[rows],
            self.mode,
        )


@dataclass(frozen=True)
class HorizonLabels:
    """Binary outcome within ``horizon`` days; ``included`` False marks exclusions."""

    tasks: tuple[CodeId, ...]
    patient_ids: tuple[str, ...]
    horizon: float
    positive: np.ndarray
    included: np.ndarray

    def value(self, patient: int, task: int) -> Optional[bool]:
        if not self.included[patient, task]:
            return None
        return bool(self.positive[patient, task])


@dataclass(frozen=True)
class LabelDensity:
    counts: np.ndarray
    cdf: list[tuple[int, float]]

    @property
    def mean(self) -> float:
        return float(self.counts.mean()) if len(self.counts) else 0.0


def _task_lookup(tasks: Sequence[CodeId]) -> dict[CodeId, list[int]]:
    lookup: dict[CodeId, list[int]] = {}
    for k, code in enumerate(tasks):
        lookup.setdefault(code, []).append(k)
    return lookup


def _matches(dag: OntologyDag, code: CodeId, lookup: dict[CodeId, list[int]], cache: dict) -> list[int]:
    hit = cache.get(code)
    if hit is None:
        hit = sorted({k for c in dag.closure(code) for k in lookup.get(c, ())})
        cache[code] = hit
    return hit


def _warn_unseen(cohort: Cohort, dag: OntologyDag, tasks: Sequence[CodeId]) -> None:
    seen = {e.code for p in cohort.patients for e in p.events}
    for code in tasks:
        if code.text != DEATH_CODE and code not in dag and code not in seen:
            logger.warning("task %s is absent from the ontology and never observed; all labels censored", code.text)


def _chunks(n: int, threads: int) -> list[range]:
    threads = max(1, int(threads))
    size = max(1, math.ceil(n / threads))
    return [range(s, min(n, s + size)) for s in range(0, n, size)]


def _parallel_rows(fn, patients: Sequence[PatientTimeline], threads: int):
    """Apply ``fn`` to contiguous patient ranges and stitch results in order."""
    ranges = _chunks(len(patients), threads)
    if len(ranges) <= 1:
        return [fn(patients[r.start:r.stop]) for r in ranges]
    with ThreadPoolExecutor(max_workers=len(ranges)) as pool:
        return list(pool.map(lambda r: fn(patients[r.start:r.stop]), ranges))


def _stack(parts, k: int, dtype) -> np.ndarray:
    parts = [p for p in parts if len(p)]
    if not parts:
        return np.zeros((0, k), dtype=dtype)
    return np.concatenate(parts, axis=0)


def label_tte(cohort: Cohort, dag: OntologyDag, tasks: Sequence[CodeId], threads: int = 1) -> TaskLabelMatrix:
    """Time to first occurrence of each task after the index time.

    An event counts for a task when the task code is the event's code or one
    of its ontology ancestors. Events at exactly the index time are ignored;
    events after ``min(record_end, death_time)`` are ignored. The ``Death``
    task uses the death time as its event.
    """
    tasks = tuple(tasks)
    if not tasks:
        raise ValueError("tasks must be non-empty")
    _warn_unseen(cohort, dag, tasks)
    lookup = _task_lookup(tasks)
    death_cols = [k for k, c in enumerate(tasks) if c.text == DEATH_CODE]
    k_tasks = len(tasks)

    def run(patients):
        cache: dict = {}
        dur = np.empty((len(patients), k_tasks))
        ev = np.zeros((len(patients), k_tasks), dtype=bool)
        for row, p in enumerate(patients):
            end = p.censor_time
            dur[row, :] = end - p.index_time
            remaining = k_tasks
            for e in p.events:
                if e.time <= p.index_time:
                    continue
                if e.time > end or remaining == 0:
                    break
                for k in _matches(dag, e.code, lookup, cache):
                    if not ev[row, k] and tasks[k].text != DEATH_CODE:
                        ev[row, k] = True
                        dur[row, k] = e.time - p.index_time
                        remaining -= 1
            if p.death_time is not None and p.death_time > p.index_time:
                for k in death_cols:
                    ev[row, k] = True
                    dur[row, k] = p.death_time - p.index_time
        return dur, ev

    parts = _parallel_rows(run, cohort.patients, threads)
    return TaskLabelMatrix(
        tasks,
        tuple(cohort.patient_ids),
        _stack([d for d, _ in parts], k_tasks, float),
        _stack([e for _, e in parts], k_tasks, bool),
        "tte",
    )


def _index_visit(p: PatientTimeline) -> Optional[int]:
    if p.index_visit_id is not None:
        return p.index_visit_id
    for e in p.events:
        if e.time == p.index_time and e.visit_id is not None:
            return e.visit_id
    return None


def label_visit(
    cohort: Cohort,
    dag: OntologyDag,
    tasks: Sequence[CodeId],
    window: float = DEFAULT_VISIT_WINDOW,
    threads: int = 1,
) -> TaskLabelMatrix:
    """Binary labels for task codes recorded in the index visit (duration 0).

    Visit membership is ``visit_id`` equality with the index visit; for events
    without a visit id (or an unknown index visit) it is
    ``|time - index_time| <= window``. Nothing after censoring counts.
    """
    if window < 0:
        raise ValueError("window must be >= 0")
    tasks = tuple(tasks)
    if not tasks:
        raise ValueError("tasks must be non-empty")
    _warn_unseen(cohort, dag, tasks)
    lookup = _task_lookup(tasks)
    k_tasks = len(tasks)

    def run(patients):
        cache: dict = {}
        ev = np.zeros((len(patients), k_tasks), dtype=bool)
        for row, p in enumerate(patients):
            visit = _index_visit(p)
            end = p.censor_time
            for e in p.events:
                if e.time > end:
                    break
                if visit is not None and e.visit_id is not None:
                    same = e.visit_id == visit
                else:
                    same = abs(e.time - p.index_time) <= window
                if same:
                    for k in _matches(dag, e.code, lookup, cache):
                        ev[row, k] = True
        return ev

    parts = _parallel_rows(run, cohort.patients, threads)
    ev = _stack(parts, k_tasks, bool)
    return TaskLabelMatrix(tasks, tuple(cohort.patient_ids), np.zeros(ev.shape), ev, "visit")


def label_mtl(cohort: Cohort, dag: OntologyDag, tasks: Sequence[CodeId], threads: int = 1) -> TaskLabelMatrix:
    """Presence of each task anywhere after index, as duration-0 binary labels."""
    tte = label_tte(cohort, dag, tasks, threads=threads)
    return TaskLabelMatrix(tte.tasks, tte.patient_ids, np.zeros(tte.events.shape), tte.events, "mtl")


def binarize_horizon(matrix: TaskLabelMatrix, horizon: float) -> HorizonLabels:
    """Event-within-horizon targets; patients censored before the horizon are excluded."""
    if matrix.mode != "tte":
        raise ValueError(f"binarize_horizon needs tte labels, got mode {matrix.mode!r}")
    if not horizon > 0:
        raise ValueError("horizon must be > 0")
    d, e = matrix.durations, matrix.events
    positive = e & (d <= horizon)
    included = positive | (d >= horizon)
    return HorizonLabels(matrix.tasks, matrix.patient_ids, float(horizon), positive & included, included)


def label_density(matrix: TaskLabelMatrix) -> LabelDensity:
    counts = matrix.events.sum(axis=1).astype(int)
    n = len(counts)
    cdf = []
    if n:
        values, freq = np.unique(counts, return_counts=True)
        cum = np.cumsum(freq)
        cdf = [(int(v), float(c) / n) for v, c in zip(values, cum)]
    return LabelDensity(counts, cdf)


def write_labels(matrix: TaskLabelMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "task", "duration_days", "event"])
        for i, pid in enumerate(matrix.patient_ids):
            for k, code in enumerate(matrix.tasks):
                w.writerow([pid, code.text, repr(float(matrix.durations[i, k])), int(matrix.events[i, k])])


def write_horizon_labels(labels: HorizonLabels, matrix: TaskLabelMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "task", "duration_days", "event", "horizon_days"])
        for i, pid in enumerate(labels.patient_ids):
            for k, code in enumerate(labels.tasks):
                if labels.included[i, k]:
                    w.writerow([
                        pid,
                        code.text,
                        repr(float(matrix.durations[i, k])),
                        int(labels.positive[i, k]),
                        repr(labels.horizon),
                    ])


def read_labels(path, vocab=None, mode: str = "tte") -> TaskLabelMatrix:
    """Read ``labels.csv`` back into a dense matrix (patients in file order)."""
    from .cohort import ParseError, Vocabulary

    vocab = vocab if vocab is not None else Vocabulary()
    pids: dict[str, int] = {}
    tasks: dict[str, int] = {}
    cells = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, 2):
            try:
                pid, task = row["patient_id"], row["task"]
                dur, ev = float(row["duration_days"]), int(row["event"])
            except (KeyError, TypeError, ValueError):
                raise ParseError(path, lineno, "bad labels row") from None
            i = pids.setdefault(pid, len(pids))
            k = tasks.setdefault(task, len(tasks))
            cells.append((i, k, dur, ev))
    dur = np.full((len(pids), len(tasks)), np.nan)
    ev = np.zeros((len(pids), len(tasks)), dtype=bool)
    for i, k, d, e in cells:
        dur[i, k] = d
        ev[i, k] = bool(e)
    if np.isnan(dur).any():
        raise ValueError(f"{path}: label matrix is not dense")
    return TaskLabelMatrix(tuple(vocab.intern(t) for t in tasks), tuple(pids), dur, ev, mode)
