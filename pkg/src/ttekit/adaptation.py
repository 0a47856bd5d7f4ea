"""Task heads trained on frozen features: Cox (DeepSurv-style) and logistic."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .peann import TrainConfig, minibatch_descent

logger = logging.getLogger(__name__)

__all__ = [
    "CoxHead",
    "LogisticHead",
    "CoxInapplicableError",
    "cox_nll",
    "cox_loss_grad",
    "fit_cox",
    "logistic_loss_grad",
    "fit_logistic",
    "save_head",
    "load_head",
    "write_predictions",
    "read_predictions",
    "COX_DEFAULTS",
    "LOGISTIC_DEFAULTS",
]

COX_DEFAULTS = TrainConfig(lr=0.05, epochs=400, batch=None, optimizer="adam")
LOGISTIC_DEFAULTS = TrainConfig(lr=0.05, epochs=400, batch=None, optimizer="adam")


class CoxInapplicableError(ValueError):
    pass


def _as_survival(labels, durations=None, events=None):
    if labels is not None:
        durations = np.array([lab.duration for lab in labels], dtype=float)
        events = np.array([lab.event for lab in labels], dtype=bool)
    return np.asarray(durations, dtype=float), np.asarray(events, dtype=bool)


@dataclass
class CoxHead:
    """Log-partial-hazard ``beta . phi(x)``; ``phi`` is identity or one tanh layer."""

    beta: np.ndarray
    W: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None
    baseline_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    baseline_cumhaz: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        if (self.W is None) != (self.c is None):
            raise ValueError("hidden layer needs both W and c")
        if self.W is not None:
            self.W = np.asarray(self.W, dtype=float)
            self.c = np.asarray(self.c, dtype=float)
            if self.W.shape[0] != self.beta.shape[0] or self.c.shape != self.beta.shape:
                raise ValueError("hidden layer width must match beta")

    @classmethod
    def init(cls, dim: int, hidden: Optional[int] = None, seed: int = 0) -> "CoxHead":
        if hidden is None:
            return cls(np.zeros(dim))
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(dim)
        return cls(
            rng.uniform(-bound, bound, size=hidden),
            rng.uniform(-bound, bound, size=(hidden, dim)),
            rng.uniform(-bound, bound, size=hidden),
        )

    @property
    def hidden(self) -> bool:
        return self.W is not None

    def params(self) -> dict[str, np.ndarray]:
        p = {"beta": self.beta}
        if self.hidden:
            p.update(W=self.W, c=self.c)
        return p

    def set_params(self, params):
        self.beta = params["beta"]
        if self.hidden:
            self.W, self.c = params["W"], params["c"]

    def _phi(self, X):
        X = np.asarray(X, dtype=float)
        return np.tanh(X @ self.W.T + self.c) if self.hidden else X

    def risk(self, X) -> np.ndarray:
        return self._phi(X) @ self.beta

    def predict_survival(self, X, times) -> np.ndarray:
        """Breslow survival ``exp(-H0(t) exp(r))``; needs a fitted baseline."""
        if len(self.baseline_times) == 0:
            raise ValueError("head has no baseline hazard; fit it first")
        idx = np.searchsorted(self.baseline_times, np.asarray(times, dtype=float), side="right") - 1
        h0 = np.where(idx >= 0, self.baseline_cumhaz[np.maximum(idx, 0)], 0.0)
        return np.exp(-np.exp(self.risk(X))[:, None] * h0[None, :])


def cox_loss_grad(head: CoxHead, X, durations, events):
    """Summed Breslow negative log partial likelihood and parameter gradients."""
    durations = np.asarray(durations, dtype=float)
    events = np.asarray(events, dtype=bool)
    if not events.any():
        raise CoxInapplicableError("Cox partial likelihood needs at least one event; none present")
    phi = head._phi(X)
    r = phi @ head.beta
    loss, g_r = kernels.cox_breslow(durations, events, r)
    grads = {"beta": phi.T @ g_r}
    if head.hidden:
        g_pre = (g_r[:, None] * head.beta[None, :]) * (1.0 - phi * phi)
        grads["W"] = g_pre.T @ np.asarray(X, dtype=float)
        grads["c"] = g_pre.sum(axis=0)
    return loss, grads


def cox_nll(head: CoxHead, X, labels=None, *, durations=None, events=None) -> float:
    d, e = _as_survival(labels, durations, events)
    return cox_loss_grad(head, X, d, e)[0]


def _breslow_baseline(durations, events, risk):
    order = np.argsort(durations, kind="mergesort")
    t, e, w = durations[order], events[order], np.exp(risk[order])
    times = np.unique(t[e])
    at_risk = np.array([w[t >= s].sum() for s in times])
    deaths = np.array([np.sum(e & (t == s)) for s in times], dtype=float)
    return times, np.cumsum(deaths / at_risk)


def fit_cox(head: CoxHead, X, labels=None, config: TrainConfig = COX_DEFAULTS, *, durations=None, events=None) -> CoxHead:
    """Gradient-descent fit of the Cox head; the input head is left untouched.

    The objective is the partial likelihood divided by the event count so the
    step size does not depend on cohort size. Minibatches (``config.batch``)
    are supported but full-batch is the default since every batch needs an
    event.
    """
    d, e = _as_survival(labels, durations, events)
    X = np.asarray(X, dtype=float)
    n_events = int(e.sum())
    if n_events == 0:
        raise CoxInapplicableError("Cox partial likelihood needs at least one event; none present")
    work = copy.deepcopy(head)

    def loss_grad(idx):
        if not e[idx].any():
            zero = {k: np.zeros_like(v) for k, v in work.params().items()}
            return 0.0, zero
        loss, g = cox_loss_grad(work, X[idx], d[idx], e[idx])
        scale = 1.0 / e[idx].sum()
        return loss * scale, {k: v * scale for k, v in g.items()}

    def evaluate():
        return [("train", cox_loss_grad(work, X, d, e)[0] / n_events)]

    minibatch_descent(work.params(), loss_grad, len(d), config, evaluate, work.set_params)
    work.baseline_times, work.baseline_cumhaz = _breslow_baseline(d, e, work.risk(X))
    return work


@dataclass
class LogisticHead:
    weights: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.bias = float(self.bias)

    def params(self):
        return {"w": self.weights, "b": np.array([self.bias])}

    def set_params(self, params):
        self.weights = params["w"]
        self.bias = float(params["b"][0])

    def logit(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.weights + self.bias

    def predict_proba(self, X) -> np.ndarray:
        z = self.logit(X)
        return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def logistic_loss_grad(head: LogisticHead, X, y, penalty: str = "l2", strength: float = 0.0):
    """Mean cross-entropy plus ``strength * (0.5 ||w||^2 | ||w||_1)``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    z = head.logit(X)
    # log(1 + e^z) - y z, evaluated stably
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    r = (head.predict_proba(X) - y) / len(y)
    gw = X.T @ r
    if penalty == "l2":
        loss += 0.5 * strength * float(head.weights @ head.weights)
        gw = gw + strength * head.weights
    elif penalty == "l1":
        loss += strength * float(np.abs(head.weights).sum())
        gw = gw + strength * np.sign(head.weights)
    else:
        raise ValueError(f"unknown penalty {penalty!r}")
    return loss, {"w": gw, "b": np.array([r.sum()])}


def fit_logistic(
    head: LogisticHead,
    X,
    y,
    config: TrainConfig = LOGISTIC_DEFAULTS,
    penalty: str = "l2",
    strength: float = 0.0,
) -> LogisticHead:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if y.size and not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    y = y.astype(float)
    work = copy.deepcopy(head)
    if len(y) == 0 or y.min() == y.max():
        logger.warning("single-class labels; fitting bias only")
        p = (y.sum() + 0.5) / (len(y) + 1.0)
        work.weights = np.zeros_like(work.weights)
        work.bias = math.log(p / (1 - p))
        return work

    def loss_grad(idx):
        return logistic_loss_grad(work, X[idx], y[idx], penalty, strength)

    def evaluate():
        return [("train", logistic_loss_grad(work, X, y, penalty, strength)[0])]

    minibatch_descent(work.params(), loss_grad, len(y), config, evaluate, work.set_params)
    return work


def save_head(head, path, task: str, **metadata) -> None:
    if isinstance(head, CoxHead):
        doc = {"kind": "cox", "task": task, "beta": head.beta.tolist()}
        if head.hidden:
            doc["W"] = head.W.tolist()
            doc["c"] = head.c.tolist()
        doc["baseline_times"] = head.baseline_times.tolist()
        doc["baseline_cumhaz"] = head.baseline_cumhaz.tolist()
    else:
        doc = {"kind": "logistic", "task": task, "weights": head.weights.tolist(), "bias": head.bias}
    doc["metadata"] = metadata
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_head(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc["kind"] == "cox":
        W = np.array(doc["W"]) if "W" in doc else None
        c = np.array(doc["c"]) if "c" in doc else None
        head = CoxHead(np.array(doc["beta"]), W, c)
        head.baseline_times = np.array(doc.get("baseline_times", []), dtype=float)
        head.baseline_cumhaz = np.array(doc.get("baseline_cumhaz", []), dtype=float)
        return head, doc
    return LogisticHead(np.array(doc["weights"]), doc["bias"]), doc


def write_predictions(path, rows: Sequence[tuple[str, str, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "task", "score"])
        for pid, task, score in rows:
            w.writerow([pid, task, repr(float(score))])


def read_predictions(path) -> dict[str, dict[str, float]]:
    """``{task: {patient_id: score}}``"""
    out: dict[str, dict[str, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["task"], {})[row["patient_id"]] = float(row["score"])
    return out
