"""Survival and classification metrics with bootstrap confidence intervals.

Ties: at equal times an event precedes a censoring, both for concordance
pairs and for the censoring-distribution estimate used by IPCW.
"""
from __future__ import annotations

import json
import contextvars
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import ndtr
from scipy.stats import rankdata

from . import kernels

logger = logging.getLogger(__name__)
_QUIET = contextvars.ContextVar("ttekit_metrics_quiet", default=False)

__all__ = [
    "UndefinedMetricError",
    "KmCurve",
    "MetricReport",
    "harrells_c",
    "kaplan_meier",
    "censoring_survival",
    "td_c_statistic",
    "time_dependent_auc",
    "brier_score",
    "integrated_brier",
    "auroc",
    "bootstrap",
    "z_test",
    "write_report",
    "write_km",
    "N_BOOT",
]

N_BOOT = 1000
_AUC_CHUNK = 1024


class UndefinedMetricError(ValueError):
    """The metric has no meaning on this data (e.g. no comparable pairs)."""


def _surv_arrays(labels=None, durations=None, events=None):
    if labels is not None:
        durations = [lab.duration for lab in labels]
        events = [lab.event for lab in labels]
    d = np.asarray(durations, dtype=float)
    e = np.asarray(events, dtype=bool)
    if d.shape != e.shape or d.ndim != 1:
        raise ValueError("durations and events must be matching 1-D arrays")
    return d, e


def harrells_c(scores, labels=None, *, durations=None, events=None) -> float:
    """Harrell's concordance index; higher score means earlier expected event.

    Risk ties among comparable pairs count one half.
    """
    d, e = _surv_arrays(labels, durations, events)
    s = np.asarray(scores, dtype=float)
    if s.shape != d.shape:
        raise ValueError("scores must have one entry per patient")
    conc, tied, comp = kernels.concordance_counts(d, e, s)
    if comp == 0:
        raise UndefinedMetricError("no comparable pairs")
    return (conc + 0.5 * tied) / comp


@dataclass(frozen=True)
class KmCurve:
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    n: int = 0

    def __call__(self, t) -> np.ndarray:
        """Right-continuous step value ``S(t)``."""
        return self._step(t, "right")

    def left(self, t) -> np.ndarray:
        """Left limit ``S(t-)``."""
        return self._step(t, "left")

    def _step(self, t, side):
        t = np.asarray(t, dtype=float)
        if len(self.times) == 0:
            return np.ones_like(t)
        idx = np.searchsorted(self.times, t, side=side) - 1
        return np.where(idx >= 0, self.survival[np.maximum(idx, 0)], 1.0)


def kaplan_meier(labels=None, *, durations=None, events=None) -> KmCurve:
    """Product-limit estimate at the distinct event times.

    Patients censored at an event time stay in that time's risk set.
    """
    d, e = _surv_arrays(labels, durations, events)
    if d.size == 0:
        raise ValueError("kaplan_meier needs at least one patient")
    times = np.unique(d[e])
    sorted_d = np.sort(d)
    at_risk = len(d) - np.searchsorted(sorted_d, times, side="left")
    ev_sorted = np.sort(d[e])
    n_events = np.searchsorted(ev_sorted, times, side="right") - np.searchsorted(ev_sorted, times, side="left")
    surv = _product_limit(at_risk, n_events)
    return KmCurve(times, surv, at_risk.astype(int), n_events.astype(int), len(d))


def _product_limit(at_risk: np.ndarray, n_events: np.ndarray) -> np.ndarray:
    """``cumprod(1 - d/n)`` with each uninterrupted run collapsed to one ratio.

    While nobody leaves the risk set between consecutive times the factors
    telescope to ``remaining / n_start``, so uncensored data reproduces the
    empirical fraction exactly instead of accumulating rounding.
    """
    if len(at_risk) == 0:
        return np.zeros(0)
    at_risk = at_risk.astype(float)
    remaining = at_risk - n_events
    new_run = np.ones(len(at_risk), dtype=bool)
    new_run[1:] = at_risk[1:] != remaining[:-1]
    run = np.cumsum(new_run) - 1
    starts = np.flatnonzero(new_run)
    ends = np.append(starts[1:] - 1, len(at_risk) - 1)
    ratio = remaining[ends] / at_risk[starts]
    base = np.concatenate([[1.0], np.cumprod(ratio)[:-1]])
    return base[run] * (remaining / at_risk[starts][run])


def censoring_survival(durations, events) -> KmCurve:
    """KM estimate ``G`` of the censoring distribution.

    Events at a censoring time have already left the risk set there.
    """
    d = np.asarray(durations, dtype=float)
    e = np.asarray(events, dtype=bool)
    cens = d[~e]
    times = np.unique(cens)
    if times.size == 0:
        return KmCurve(times, np.zeros(0), np.zeros(0, dtype=int), np.zeros(0, dtype=int), len(d))
    sorted_d = np.sort(d)
    sorted_c = np.sort(cens)
    n_cens = np.searchsorted(sorted_c, times, side="right") - np.searchsorted(sorted_c, times, side="left")
    at_risk = (len(d) - np.searchsorted(sorted_d, times, side="right")) + n_cens
    surv = _product_limit(at_risk, n_cens)
    return KmCurve(times, surv, at_risk.astype(int), n_cens.astype(int), len(d))


RiskInput = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


def _risk_matrix(risk: RiskInput, times: np.ndarray, n: int) -> np.ndarray:
    if callable(risk):
        R = np.asarray(risk(times), dtype=float)
    else:
        R = np.asarray(risk, dtype=float)
        if R.ndim == 1:
            R = np.broadcast_to(R[:, None], (n, len(times)))
    if R.shape != (n, len(times)):
        raise ValueError(f"risk must give an (n, n_times) = {(n, len(times))} array, got {R.shape}")
    return R


def _pair_auc(case: np.ndarray, ctrl: np.ndarray) -> float:
    ranks = rankdata(np.concatenate([case, ctrl]))
    n1, n0 = len(case), len(ctrl)
    return (ranks[:n1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0)


def time_dependent_auc(risk: RiskInput, labels=None, *, durations=None, events=None):
    """Incident/dynamic AUC at each distinct event time.

    Cases at ``t`` are events with ``T = t``; controls have ``T > t``.
    ``risk`` is a per-patient score, or a callable mapping an array of times
    to an ``(n, n_times)`` risk matrix. Returns ``(times, auc)`` with NaN
    where no control exists.
    """
    d, e = _surv_arrays(labels, durations, events)
    times = np.unique(d[e])
    R = _risk_matrix(risk, times, len(d))
    ev = np.flatnonzero(e)
    k_of = np.searchsorted(times, d[ev])
    num = np.zeros(len(times))
    den = np.zeros(len(times))
    for start in range(0, len(ev), _AUC_CHUNK):
        rows, ks = ev[start:start + _AUC_CHUNK], k_of[start:start + _AUC_CHUNK]
        case = R[rows, ks][:, None]
        other = R[:, ks].T
        ctrl = d[None, :] > d[rows][:, None]
        score = np.where(ctrl, (case > other) + 0.5 * (case == other), 0.0).sum(axis=1)
        np.add.at(num, ks, score)
        np.add.at(den, ks, ctrl.sum(axis=1))
    auc = np.full(len(times), np.nan)
    ok = den > 0
    auc[ok] = num[ok] / den[ok]
    return times, auc


def td_c_statistic(risk: RiskInput, labels=None, *, durations=None, events=None) -> float:
    """Time-dependent concordance: AUC(t) averaged with weights ``f(t) S(t)``.

    ``f`` is the KM probability mass at each event time and ``S`` the KM
    survival just after it.
    """
    d, e = _surv_arrays(labels, durations, events)
    if not e.any():
        raise UndefinedMetricError("no events")
    times, auc = time_dependent_auc(risk, durations=d, events=e)
    km = kaplan_meier(durations=d, events=e)
    s_after = km(times)
    mass = km.left(times) - s_after
    w = mass * s_after
    ok = ~np.isnan(auc) & (w > 0)
    if not ok.any():
        raise UndefinedMetricError("no event time has both cases and controls")
    return float(np.sum(auc[ok] * w[ok]) / np.sum(w[ok]))


SurvInput = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


def brier_score(surv_at_t, labels=None, t: float = 0.0, *, durations=None, events=None, G: Optional[KmCurve] = None) -> float:
    """IPCW Brier score at a single time ``t``."""
    d, e = _surv_arrays(labels, durations, events)
    G = censoring_survival(d, e) if G is None else G
    s = np.asarray(surv_at_t, dtype=float)
    died = e & (d <= t)
    alive = d > t
    g_t = float(G(t))
    if g_t <= 0 and alive.any():
        raise UndefinedMetricError(f"censoring survival is 0 at t={t}")
    total = np.sum(s[died] ** 2 / G.left(d[died]))
    if alive.any():
        total += np.sum((1.0 - s[alive]) ** 2) / g_t
    return float(total / len(d))


def integrated_brier(
    surv: SurvInput,
    labels=None,
    horizon: Optional[float] = None,
    *,
    durations=None,
    events=None,
    n_grid: int = 100,
) -> float:
    """Integrated Brier score over ``[0, horizon]`` on a uniform grid.

    ``surv`` maps an array of times to an ``(n, n_times)`` matrix of predicted
    survival probabilities, or is that matrix already evaluated on
    ``linspace(0, horizon, n_grid)``. ``horizon`` defaults to the largest observed
    time. Grid points where the censoring survival has reached 0 are
    dropped (with a warning) and the average runs over what remains.
    """
    d, e = _surv_arrays(labels, durations, events)
    T = float(d.max()) if horizon is None else float(horizon)
    if not T > 0:
        raise ValueError("horizon must be > 0")
    grid = np.linspace(0.0, T, n_grid)
    S = np.asarray(surv(grid) if callable(surv) else surv, dtype=float)
    if S.shape != (len(d), len(grid)):
        raise ValueError(f"surv must give an (n, n_times) = {(len(d), len(grid))} array, got {S.shape}")
    G = censoring_survival(d, e)
    g = G(grid)
    keep = g > 0
    if not keep.all():
        if not _QUIET.get():
            logger.warning("censoring survival reaches 0 at t=%g; truncating the Brier grid", grid[~keep][0])
        grid, g, S = grid[keep], g[keep], S[:, keep]
    if len(grid) < 2:
        raise UndefinedMetricError("fewer than two usable grid points")
    died = e[:, None] & (d[:, None] <= grid[None, :])
    alive = d[:, None] > grid[None, :]
    w_died = np.zeros(len(d))
    w_died[e] = 1.0 / G.left(d[e])
    bs = (np.where(died, S ** 2 * w_died[:, None], 0.0) + np.where(alive, (1.0 - S) ** 2 / g[None, :], 0.0)).mean(axis=0)
    return float(trapezoid(bs, grid) / (grid[-1] - grid[0]))


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with half credit for tied scores."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels must align")
    if y.all() or not y.any():
        raise UndefinedMetricError("AUROC needs both classes")
    return float(_pair_auc(s[y], s[~y]))


@dataclass
class MetricReport:
    """Bootstrap summary; ``estimate`` is the mean over defined replicates."""

    name: str
    estimate: float
    ci_low: float
    ci_high: float
    n_boot: int
    point: float = float("nan")
    n_undefined: int = 0
    samples: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "estimate": self.estimate,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n_boot": self.n_boot,
            "point": self.point,
            "n_undefined": self.n_undefined,
        }


def bootstrap(
    metric: Callable[[np.ndarray], float],
    n: int,
    n_boot: int = N_BOOT,
    seed: int = 0,
    name: str = "",
    threads: int = 1,
) -> MetricReport:
    """Patient-level bootstrap of ``metric(indices)``.

    Replicate ``i`` resamples with ``numpy.random.default_rng(seed + i)``, so
    the result does not depend on ``threads``. Undefined replicates are
    skipped; more than half undefined is an error.
    """
    if n_boot < 1:
        raise ValueError("n_boot must be >= 1")
    if n < 1:
        raise ValueError("need at least one patient")
    try:
        point = float(metric(np.arange(n)))
    except UndefinedMetricError:
        point = float("nan")

    def replicate(i: int) -> float:
        idx = np.random.default_rng(seed + i).integers(0, n, size=n)
        # the full-data evaluation above already reported any warnings
        token = _QUIET.set(True)
        try:
            return float(metric(idx))
        except UndefinedMetricError:
            return float("nan")
        finally:
            _QUIET.reset(token)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(replicate, range(n_boot)))
    else:
        values = [replicate(i) for i in range(n_boot)]
    values = np.asarray(values)
    defined = values[~np.isnan(values)]
    n_undefined = int(n_boot - len(defined))
    if n_undefined * 2 > n_boot:
        raise UndefinedMetricError(f"{n_undefined} of {n_boot} bootstrap replicates undefined")
    lo, hi = np.percentile(defined, [2.5, 97.5])
    # summation error can push the mean of constant replicates off the value itself
    estimate = float(np.clip(defined.mean(), defined.min(), defined.max()))
    return MetricReport(name, estimate, float(lo), float(hi), n_boot, point, n_undefined, defined)


def z_test(a: MetricReport, b: MetricReport) -> float:
    """Two-sided p-value for equal means of two bootstrap distributions (unpooled)."""
    if len(a.samples) < 1 or len(b.samples) < 1:
        raise ValueError("both reports need retained bootstrap samples")
    diff = float(np.mean(a.samples) - np.mean(b.samples))
    var_a = float(np.var(a.samples, ddof=1)) if len(a.samples) > 1 else 0.0
    var_b = float(np.var(b.samples, ddof=1)) if len(b.samples) > 1 else 0.0
    se = math.sqrt(var_a + var_b)
    if se == 0.0:
        return 1.0 if diff == 0.0 else 0.0
    return float(2.0 * ndtr(-abs(diff) / se))


def write_report(path, reports: Sequence[MetricReport], tests: Sequence[dict] = ()) -> None:
    doc = {"metrics": [r.to_dict() for r in reports], "z_tests": list(tests)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_km(curve: KmCurve, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("time,survival,at_risk,events\n")
        fh.write(f"0.0,1.0,{curve.n},0\n")
        for t, s, r, k in zip(curve.times, curve.survival, curve.at_risk, curve.events):
            fh.write(f"{float(t)!r},{float(s)!r},{int(r)},{int(k)}\n")
