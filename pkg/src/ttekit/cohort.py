"""Coded event timelines, the ontology DAG, and their file formats.

Times are days (floats) relative to a cohort epoch. Everything here is
immutable after construction so it can be shared across worker threads.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "CodeId",
    "Vocabulary",
    "Event",
    "PatientTimeline",
    "OntologyDag",
    "Cohort",
    "ParseError",
    "CycleError",
    "SPLITS",
    "load_events",
    "load_ontology",
    "load_features",
    "ancestors",
    "write_events",
    "write_ontology",
    "write_features",
]

SPLITS = ("train", "valid", "test")


class ParseError(ValueError):
    """Malformed input line. ``lineno`` is 1-based."""

    def __init__(self, path, lineno: int, message: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}: line {lineno}: {message}")


class CycleError(ValueError):
    def __init__(self, cycle: Sequence[str]):
        self.cycle = list(cycle)
        super().__init__("ontology contains a cycle: " + " -> ".join(self.cycle))


@dataclass(frozen=True, order=True)
class CodeId:
    id: int
    text: str = field(compare=False)

    def __str__(self) -> str:
        return self.text


class Vocabulary:
    """Interns code strings to dense non-negative integer ids."""

    def __init__(self, texts: Iterable[str] = ()):
        self._by_text: dict[str, CodeId] = {}
        self._codes: list[CodeId] = []
        for t in texts:
            self.intern(t)

    def intern(self, text: str) -> CodeId:
        code = self._by_text.get(text)
        if code is None:
            if not isinstance(text, str) or not text:
                raise ValueError(f"code text must be a non-empty string, got {text!r}")
            code = CodeId(len(self._codes), text)
            self._by_text[text] = code
            self._codes.append(code)
        return code

    def get(self, text: str) -> Optional[CodeId]:
        return self._by_text.get(text)

    def __getitem__(self, key) -> CodeId:
        if isinstance(key, str):
            return self._by_text[key]
        return self._codes[key]

    def __contains__(self, text: str) -> bool:
        return text in self._by_text

    def __len__(self) -> int:
        return len(self._codes)

    def __iter__(self) -> Iterator[CodeId]:
        return iter(self._codes)


@dataclass(frozen=True)
class Event:
    code: CodeId
    time: float
    visit_id: Optional[int] = None

    def __post_init__(self):
        if not math.isfinite(self.time):
            raise ValueError(f"event time must be finite, got {self.time}")
        if self.visit_id is not None and self.visit_id < 0:
            raise ValueError("visit_id must be non-negative")


@dataclass(frozen=True)
class PatientTimeline:
    patient_id: str
    events: tuple[Event, ...]
    record_end: float
    index_time: float
    death_time: Optional[float] = None
    index_visit_id: Optional[int] = None
    split: str = "train"

    def __post_init__(self):
        times = [e.time for e in self.events]
        if any(b < a for a, b in zip(times, times[1:])):
            object.__setattr__(
                self, "events", tuple(sorted(self.events, key=lambda e: e.time))
            )
        if self.record_end < self.index_time:
            raise ValueError(
                f"patient {self.patient_id}: record_end {self.record_end} < index_time {self.index_time}"
            )
        if self.death_time is not None and self.death_time > self.record_end:
            raise ValueError(f"patient {self.patient_id}: death_time after record_end")
        if self.split not in SPLITS:
            raise ValueError(f"patient {self.patient_id}: unknown split {self.split!r}")

    @property
    def censor_time(self) -> float:
        """End of observation: record end, or death if earlier."""
        if self.death_time is None:
            return self.record_end
        return min(self.record_end, self.death_time)

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)


class OntologyDag:
    """Child -> parent code hierarchy with cached transitive closures."""

    def __init__(self, vocab: Vocabulary, nodes: Iterable[CodeId], edges: Iterable[tuple[CodeId, CodeId]]):
        self.vocab = vocab
        self.nodes = frozenset(nodes)
        parents: dict[CodeId, set[CodeId]] = {n: set() for n in self.nodes}
        children: dict[CodeId, set[CodeId]] = {n: set() for n in self.nodes}
        for child, parent in edges:
            if child not in parents or parent not in parents:
                raise ValueError(f"edge {child.text}->{parent.text} references an unknown node")
            parents[child].add(parent)
            children[parent].add(child)
        self._parents = {k: frozenset(v) for k, v in parents.items()}
        self._children = {k: frozenset(v) for k, v in children.items()}
        self._check_acyclic()
        self._closure: dict[CodeId, frozenset[CodeId]] = {}

    def _check_acyclic(self) -> None:
        white, grey, black = 0, 1, 2
        color = {n: white for n in self.nodes}
        for root in sorted(self.nodes):
            if color[root] != white:
                continue
            stack = [(root, iter(sorted(self._parents[root])))]
            path = [root]
            color[root] = grey
            while stack:
                node, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    color[node] = black
                    stack.pop()
                    path.pop()
                elif color[nxt] == grey:
                    start = path.index(nxt)
                    raise CycleError([c.text for c in path[start:]] + [nxt.text])
                elif color[nxt] == white:
                    color[nxt] = grey
                    path.append(nxt)
                    stack.append((nxt, iter(sorted(self._parents[nxt]))))

    def parents(self, code: CodeId) -> frozenset[CodeId]:
        return self._parents[code]

    def children(self, code: CodeId) -> frozenset[CodeId]:
        return self._children[code]

    def ancestors(self, code: CodeId) -> frozenset[CodeId]:
        """Transitive parents of ``code``, excluding ``code`` itself."""
        if code not in self._parents:
            raise KeyError(f"unknown code {code.text!r}")
        cached = self._closure.get(code)
        if cached is not None:
            return cached
        seen: set[CodeId] = set()
        stack = list(self._parents[code])
        while stack:
            c = stack.pop()
            if c in seen:
                continue
            seen.add(c)
            stack.extend(self._parents[c] - seen)
        result = frozenset(seen)
        self._closure[code] = result
        return result

    def closure(self, code: CodeId) -> frozenset[CodeId]:
        """``code`` plus its ancestors; codes outside the DAG map to themselves."""
        if code not in self._parents:
            return frozenset((code,))
        return self.ancestors(code) | {code}

    def is_related(self, a: CodeId, b: CodeId) -> bool:
        """True if one code is an ancestor of the other."""
        return (a in self._parents and b in self.ancestors(a)) or (
            b in self._parents and a in self.ancestors(b)
        )

    def edges(self) -> list[tuple[CodeId, CodeId]]:
        return sorted((c, p) for c, ps in self._parents.items() for p in ps)

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, code: CodeId) -> bool:
        return code in self._parents


def ancestors(dag: OntologyDag, code: CodeId) -> frozenset[CodeId]:
    return dag.ancestors(code)


@dataclass(frozen=True)
class Cohort:
    patients: tuple[PatientTimeline, ...]
    vocab: Vocabulary
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise ValueError("patient_id must be unique within a cohort")
        if self.features is not None:
            feats = np.asarray(self.features, dtype=float)
            if feats.ndim != 2 or feats.shape[0] != len(self.patients):
                raise ValueError(
                    f"features must be (n_patients, m); got {feats.shape} for {len(self.patients)} patients"
                )
            feats.setflags(write=False)
            object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return len(self.patients)

    @property
    def patient_ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]

    @property
    def splits(self) -> np.ndarray:
        return np.array([p.split for p in self.patients])

    def split_mask(self, split: str) -> np.ndarray:
        return self.splits == split

    def with_features(self, features: np.ndarray) -> "Cohort":
        return Cohort(self.patients, self.vocab, features)

    def index_of(self) -> dict[str, int]:
        return {p.patient_id: i for i, p in enumerate(self.patients)}


def _read_jsonl(path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ParseError(path, lineno, "expected a JSON object")
            yield lineno, rec


def _require(rec: dict, key: str, path, lineno: int):
    if key not in rec or rec[key] is None:
        raise ParseError(path, lineno, f"missing required field {key!r}")
    return rec[key]


def _as_float(value, key: str, path, lineno: int) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ParseError(path, lineno, f"field {key!r} is not a number: {value!r}") from None
    if not math.isfinite(out):
        raise ParseError(path, lineno, f"field {key!r} must be finite")
    return out


def load_events(path, patients_path=None, vocab: Optional[Vocabulary] = None) -> Cohort:
    """Read ``events.jsonl`` (+ companion ``patients.jsonl``) into a cohort.

    If ``patients_path`` is None a ``patients.jsonl`` next to ``path`` is used
    when present. Patients without an anchor record are anchored at their
    first event, with ``record_end`` at their last event.
    """
    path = Path(path)
    vocab = vocab if vocab is not None else Vocabulary()
    events: dict[str, list[Event]] = {}
    for lineno, rec in _read_jsonl(path):
        pid = str(_require(rec, "patient_id", path, lineno))
        text = _require(rec, "code", path, lineno)
        if not isinstance(text, str) or not text:
            raise ParseError(path, lineno, "field 'code' must be a non-empty string")
        t = _as_float(_require(rec, "time", path, lineno), "time", path, lineno)
        visit = rec.get("visit_id")
        if visit is not None:
            if not isinstance(visit, int) or isinstance(visit, bool) or visit < 0:
                raise ParseError(path, lineno, "field 'visit_id' must be a non-negative integer")
        events.setdefault(pid, []).append(Event(vocab.intern(text), t, visit))

    if patients_path is None:
        candidate = path.with_name("patients.jsonl")
        patients_path = candidate if candidate.exists() and candidate != path else None

    anchors: dict[str, dict] = {}
    order: list[str] = []
    if patients_path is not None:
        for lineno, rec in _read_jsonl(patients_path):
            pid = str(_require(rec, "patient_id", patients_path, lineno))
            if pid in anchors:
                raise ParseError(patients_path, lineno, f"duplicate patient {pid!r}")
            index_time = _as_float(_require(rec, "index_time", patients_path, lineno), "index_time", patients_path, lineno)
            record_end = _as_float(_require(rec, "record_end", patients_path, lineno), "record_end", patients_path, lineno)
            death = rec.get("death_time")
            death = None if death is None else _as_float(death, "death_time", patients_path, lineno)
            anchors[pid] = dict(
                index_time=index_time,
                record_end=record_end,
                death_time=death,
                index_visit_id=rec.get("index_visit_id"),
                split=rec.get("split", "train"),
                lineno=lineno,
            )
            order.append(pid)
    for pid in events:
        if pid not in anchors:
            order.append(pid)

    patients = []
    for pid in order:
        evs = tuple(sorted(events.get(pid, ()), key=lambda e: e.time))
        a = anchors.get(pid)
        if a is None:
            lo = evs[0].time if evs else 0.0
            hi = evs[-1].time if evs else 0.0
            a = dict(index_time=lo, record_end=hi, death_time=None, index_visit_id=None, split="train")
        try:
            patients.append(
                PatientTimeline(
                    patient_id=pid,
                    events=evs,
                    record_end=a["record_end"],
                    index_time=a["index_time"],
                    death_time=a["death_time"],
                    index_visit_id=a["index_visit_id"],
                    split=a["split"],
                )
            )
        except ValueError as exc:
            if "lineno" in a:
                raise ParseError(patients_path, a["lineno"], str(exc)) from None
            raise
    return Cohort(tuple(patients), vocab)


def write_events(cohort: Cohort, events_path, patients_path) -> None:
    with open(events_path, "w", encoding="utf-8") as fh:
        for p in cohort.patients:
            for e in p.events:
                rec = {"patient_id": p.patient_id, "code": e.code.text, "time": e.time}
                if e.visit_id is not None:
                    rec["visit_id"] = e.visit_id
                fh.write(json.dumps(rec) + "\n")
    with open(patients_path, "w", encoding="utf-8") as fh:
        for p in cohort.patients:
            rec = {
                "patient_id": p.patient_id,
                "index_time": p.index_time,
                "record_end": p.record_end,
                "death_time": p.death_time,
                "split": p.split,
            }
            if p.index_visit_id is not None:
                rec["index_visit_id"] = p.index_visit_id
            fh.write(json.dumps(rec) + "\n")


def load_ontology(path, vocab: Optional[Vocabulary] = None) -> OntologyDag:
    """Read a ``child<TAB>parent`` TSV. Raises :class:`CycleError` on cycles."""
    vocab = vocab if vocab is not None else Vocabulary()
    nodes: set[CodeId] = set()
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise ParseError(path, lineno, "expected 'child<TAB>parent'")
            child, parent = vocab.intern(parts[0]), vocab.intern(parts[1])
            nodes.update((child, parent))
            edges.append((child, parent))
    return OntologyDag(vocab, nodes, edges)


def write_ontology(dag: OntologyDag, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for child, parent in sorted(dag.edges(), key=lambda e: (e[0].text, e[1].text)):
            fh.write(f"{child.text}\t{parent.text}\n")


def load_features(path, cohort: Cohort) -> Cohort:
    """Attach ``features.csv`` rows to ``cohort`` (matched on patient_id)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "patient_id":
            raise ParseError(path, 1, "header must start with 'patient_id'")
        m = len(header) - 1
        rows: dict[str, list[float]] = {}
        for lineno, row in enumerate(reader, 2):
            if len(row) != m + 1:
                raise ParseError(path, lineno, f"expected {m + 1} columns, got {len(row)}")
            try:
                rows[row[0]] = [float(v) for v in row[1:]]
            except ValueError:
                raise ParseError(path, lineno, "non-numeric feature value") from None
    missing = [pid for pid in cohort.patient_ids if pid not in rows]
    if missing:
        raise ValueError(f"features.csv lacks {len(missing)} patients, e.g. {missing[0]!r}")
    feats = np.array([rows[pid] for pid in cohort.patient_ids], dtype=float).reshape(len(cohort), m)
    return cohort.with_features(feats)


def write_features(path, patient_ids: Sequence[str], features: np.ndarray) -> None:
    features = np.asarray(features, dtype=float)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id"] + [f"f{j}" for j in range(features.shape[1])])
        for pid, row in zip(patient_ids, features):
            w.writerow([pid] + [repr(float(v)) for v in row])
