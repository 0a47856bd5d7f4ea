"""Choose pretraining task codes by binary entropy of patient presence."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .cohort import CodeId, Cohort, OntologyDag

logger = logging.getLogger(__name__)

__all__ = [
    "CodeStats",
    "DEFAULT_BUDGET",
    "DEFAULT_THETA",
    "code_entropy",
    "compute_code_stats",
    "select_rank_entropy",
    "select_greedy_cover",
    "select_tasks",
    "write_tasks",
    "read_tasks",
]

DEFAULT_BUDGET = 8192
DEFAULT_THETA = 0.95


@dataclass(frozen=True)
class CodeStats:
    code: CodeId
    patient_presence: float
    raw_count: int
    # indices of patients with the code; needed for redundancy pruning
    presence: frozenset = field(default=frozenset(), compare=False, repr=False)
    # patients in the denominator; when known, entropy is computed from counts
    n_patients: int = field(default=0, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.patient_presence <= 1.0:
            raise ValueError(f"patient_presence must be in [0, 1], got {self.patient_presence}")
        if self.raw_count < 0:
            raise ValueError("raw_count must be >= 0")

    @property
    def entropy(self) -> float:
        if self.n_patients:
            # k/n and (n-k)/n must tie exactly; 1 - k/n is not always (n-k)/n in floats
            k = round(self.patient_presence * self.n_patients)
            return code_entropy(min(k, self.n_patients - k) / self.n_patients)
        return code_entropy(self.patient_presence)


def code_entropy(p: float) -> float:
    """Binary Shannon entropy in nats, with ``0 ln 0 = 0``.

    Evaluated on ``min(p, 1 - p)``.
    """
    if not 0.0 <= p <= 1.0 or math.isnan(p):
        raise ValueError(f"p must be in [0, 1], got {p}")
    q = min(p, 1.0 - p)
    if q == 0.0:
        return 0.0
    return -q * math.log(q) - (1.0 - q) * math.log1p(-q)


def compute_code_stats(
    cohort: Cohort,
    dag: OntologyDag,
    split: Optional[str] = "train",
    threads: int = 1,
) -> list[CodeStats]:
    """Per-code presence over patients of ``split`` (all patients if None).

    Only events strictly after the index time and no later than censoring are
    counted, each attributed to its code and all ontology ancestors. Output is
    sorted by code text.
    """
    patients = [
        (i, p) for i, p in enumerate(cohort.patients) if split is None or p.split == split
    ]
    n = len(patients)

    def run(chunk):
        counts: dict[CodeId, int] = {}
        present: dict[CodeId, set[int]] = {}
        closure_cache: dict[CodeId, frozenset] = {}
        for i, p in chunk:
            end = p.censor_time
            for e in p.events:
                if e.time <= p.index_time:
                    continue
                if e.time > end:
                    break
                cl = closure_cache.get(e.code)
                if cl is None:
                    cl = closure_cache[e.code] = dag.closure(e.code)
                for c in cl:
                    counts[c] = counts.get(c, 0) + 1
                    present.setdefault(c, set()).add(i)
        return counts, present

    threads = max(1, int(threads))
    size = max(1, math.ceil(n / threads))
    chunks = [patients[s:s + size] for s in range(0, n, size)]
    if len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]

    counts: dict[CodeId, int] = {}
    present: dict[CodeId, set[int]] = {}
    for c_part, p_part in parts:
        for c, v in c_part.items():
            counts[c] = counts.get(c, 0) + v
        for c, s in p_part.items():
            present.setdefault(c, set()).update(s)
    return [
        CodeStats(c, len(present[c]) / n, counts[c], frozenset(present[c]), n)
        for c in sorted(counts, key=lambda c: c.text)
    ]


def _rank_key(s: CodeStats):
    return (-s.entropy, -s.raw_count, s.code.text)


def select_rank_entropy(stats: Sequence[CodeStats], budget: int) -> list[CodeId]:
    """Top-``budget`` codes by entropy; ties by raw count (desc) then text."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if len(stats) < budget:
        logger.warning("only %d candidate codes for a budget of %d; returning all", len(stats), budget)
    ranked = sorted(_dedupe(stats), key=_rank_key)
    return [s.code for s in ranked[:budget]]


def _jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def select_greedy_cover(
    stats: Sequence[CodeStats],
    dag: OntologyDag,
    budget: int,
    redundancy_theta: float = DEFAULT_THETA,
) -> list[CodeId]:
    """Greedy entropy selection that prunes redundant ancestors/descendants.

    After each pick, every remaining code that is an ontology ancestor or
    descendant of the pick and whose patient set overlaps it with Jaccard
    similarity ``>= redundancy_theta`` is dropped from the candidate pool.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if not 0.0 <= redundancy_theta <= 1.0:
        raise ValueError("redundancy_theta must be in [0, 1]")
    if len(stats) < budget:
        logger.warning("only %d candidate codes for a budget of %d; returning all", len(stats), budget)
    ranked = sorted(_dedupe(stats), key=_rank_key)
    dropped = [False] * len(ranked)
    chosen: list[CodeId] = []
    for i, s in enumerate(ranked):
        if len(chosen) >= budget:
            break
        if dropped[i]:
            continue
        chosen.append(s.code)
        for j in range(i + 1, len(ranked)):
            if dropped[j]:
                continue
            other = ranked[j]
            if dag.is_related(s.code, other.code) and _jaccard(s.presence, other.presence) >= redundancy_theta:
                dropped[j] = True
    return chosen


def _dedupe(stats: Sequence[CodeStats]) -> list[CodeStats]:
    seen = set()
    out = []
    for s in stats:
        if s.code in seen:
            raise ValueError(f"duplicate stats for code {s.code.text}")
        seen.add(s.code)
        out.append(s)
    return out


def select_tasks(stats, dag, budget=DEFAULT_BUDGET, strategy="rank-entropy", theta=DEFAULT_THETA):
    if strategy == "rank-entropy":
        return select_rank_entropy(stats, budget)
    if strategy == "greedy-cover":
        return select_greedy_cover(stats, dag, budget, theta)
    raise ValueError(f"unknown strategy {strategy!r}")


def write_tasks(tasks: Sequence[CodeId], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in tasks:
            fh.write(c.text + "\n")


def read_tasks(path, vocab) -> list[CodeId]:
    with open(path, encoding="utf-8") as fh:
        return [vocab.intern(line.strip()) for line in fh if line.strip()]
