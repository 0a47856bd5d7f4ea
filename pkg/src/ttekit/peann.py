"""Piecewise exponential survival model with hand-derived gradients.

For task ``k`` and piece ``p`` the hazard is ``exp(A[k*P + p] @ M + b[k*P + p])``
where ``M`` is the featurizer output. Survival over a grid of pieces is

    S(t) = exp(-sum_p lambda_p * exposure_p(t))

with ``exposure_p(t) = clip(t - B[p], 0, B[p+1] - B[p])`` and the final piece
open-ended. The per-cell negative log-likelihood is
``-[(1 - d) log S(T) + d log f(T)] = sum_p lambda_p exposure_p(T) - d log lambda_{p(T)}``.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .cohort import CodeId, Cohort, Vocabulary
from .labeling import TaskLabelMatrix

logger = logging.getLogger(__name__)

__all__ = [
    "TimeGrid",
    "Featurizer",
    "PeannModel",
    "TrainConfig",
    "TrainResult",
    "TrainingError",
    "init_model",
    "hazards",
    "survival",
    "density",
    "nll",
    "nll_grad",
    "loss_and_grad",
    "train",
    "save_model",
    "load_model",
    "write_loss_curve",
]

DEFAULT_PIECES = 8
ZERO_EVENT_SHIFT = 1e-6
MODEL_FORMAT = "ttekit.peann"
MODEL_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    """Piece boundaries ``[B_0 = 0, B_1, ..., B_P]``; piece p is ``[B_p, B_{p+1})``."""

    boundaries: tuple[float, ...]

    def __post_init__(self):
        b = tuple(float(x) for x in self.boundaries)
        if len(b) < 2:
            raise ValueError("a time grid needs at least one piece")
        if b[0] != 0.0:
            raise ValueError("first boundary must be 0")
        if any(not math.isfinite(x) for x in b) or any(hi <= lo for lo, hi in zip(b, b[1:])):
            raise ValueError("boundaries must be finite and strictly increasing")
        object.__setattr__(self, "boundaries", b)

    @property
    def n_pieces(self) -> int:
        return len(self.boundaries) - 1

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.boundaries)

    @property
    def starts(self) -> np.ndarray:
        return self.array[:-1]

    @property
    def ends(self) -> np.ndarray:
        return self.array[1:]

    def piece_of(self, t) -> np.ndarray:
        """Piece index of each time; keeps the input shape."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return kernels.piece_index(t.ravel(), self.array).reshape(t.shape)

    def exposure(self, t) -> np.ndarray:
        """Time spent in each piece, shape ``t.shape + (P,)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return kernels.piece_exposure(t.ravel(), self.array).reshape(t.shape + (self.n_pieces,))

    @classmethod
    def uniform(cls, durations, pieces: int = DEFAULT_PIECES) -> "TimeGrid":
        """Equal-width pieces spanning ``[0, max(durations)]``."""
        hi = float(np.max(durations)) if np.size(durations) else 0.0
        if not hi > 0:
            raise ValueError("need a positive maximum duration to build a grid")
        return cls(tuple(np.linspace(0.0, hi, pieces + 1)))

    @classmethod
    def quantile(cls, durations, events, pieces: int = DEFAULT_PIECES) -> "TimeGrid":
        """Pieces with roughly equal numbers of events each."""
        d = np.asarray(durations, dtype=float).ravel()
        e = np.asarray(events, dtype=bool).ravel()
        hi = float(d.max()) if d.size else 0.0
        if not hi > 0 or not e.any():
            raise ValueError("need events with positive durations for a quantile grid")
        inner = np.quantile(d[e], np.linspace(0, 1, pieces + 1)[1:-1])
        b = np.unique(np.concatenate([[0.0], inner[inner > 0], [hi]]))
        return cls(tuple(b))


@dataclass
class Featurizer:
    """Linear map or one tanh hidden layer from input features to M."""

    kind: str
    W: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"unknown featurizer kind {self.kind!r}")
        self.W = np.asarray(self.W, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        if self.W.ndim != 2 or self.c.shape != (self.W.shape[0],):
            raise ValueError("featurizer expects W (m x d) and c (m,)")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.c))):
            raise ValueError("featurizer weights must be finite")

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @property
    def output_dim(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, kind: str, input_dim: int, output_dim: int, rng: np.random.Generator) -> "Featurizer":
        bound = 1.0 / math.sqrt(input_dim)
        W = rng.uniform(-bound, bound, size=(output_dim, input_dim))
        c = rng.uniform(-bound, bound, size=output_dim)
        return cls(kind, W, c)

    @classmethod
    def identity(cls, dim: int) -> "Featurizer":
        return cls("linear", np.eye(dim), np.zeros(dim))

    def forward(self, X: np.ndarray) -> np.ndarray:
        Z = X @ self.W.T + self.c
        return np.tanh(Z) if self.kind == "mlp" else Z

    def backward(self, X: np.ndarray, M: np.ndarray, grad_M: np.ndarray) -> dict[str, np.ndarray]:
        g = grad_M * (1.0 - M * M) if self.kind == "mlp" else grad_M
        return {"W": g.T @ X, "c": g.sum(axis=0)}


@dataclass
class PeannModel:
    featurizer: Featurizer
    head_A: np.ndarray
    head_b: np.ndarray
    grid: TimeGrid
    tasks: tuple[CodeId, ...]

    def __post_init__(self):
        self.head_A = np.asarray(self.head_A, dtype=float)
        self.head_b = np.asarray(self.head_b, dtype=float)
        self.tasks = tuple(self.tasks)
        rows = len(self.tasks) * self.grid.n_pieces
        if self.head_A.shape != (rows, self.featurizer.output_dim):
            raise ValueError(f"head_A must be {(rows, self.featurizer.output_dim)}, got {self.head_A.shape}")
        if self.head_b.shape != (rows,):
            raise ValueError(f"head_b must have length {rows}")

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def n_pieces(self) -> int:
        return self.grid.n_pieces

    # parameter vector plumbing shared by the optimizers and gradient checks
    def params(self) -> dict[str, np.ndarray]:
        return {
            "feat.W": self.featurizer.W,
            "feat.c": self.featurizer.c,
            "head.A": self.head_A,
            "head.b": self.head_b,
        }

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.featurizer.W = params["feat.W"]
        self.featurizer.c = params["feat.c"]
        self.head_A = params["head.A"]
        self.head_b = params["head.b"]

    def copy(self) -> "PeannModel":
        return copy.deepcopy(self)

    def _check_x(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.featurizer.input_dim:
            raise ValueError(f"expected {self.featurizer.input_dim} input features, got {X.shape[1]}")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        return X

    def embed(self, X) -> np.ndarray:
        return self.featurizer.forward(self._check_x(X))

    def log_hazards(self, X) -> np.ndarray:
        """``(n, K, P)`` log-hazards."""
        M = self.embed(X)
        eta = M @ self.head_A.T + self.head_b
        return eta.reshape(M.shape[0], self.n_tasks, self.n_pieces)

    def hazards(self, X) -> np.ndarray:
        return np.exp(self.log_hazards(X))

    def predict_survival(self, X, task: int, times) -> np.ndarray:
        """``(n, len(times))`` survival probabilities for one task."""
        lam = self.hazards(X)[:, task, :]
        expo = self.grid.exposure(times)
        return np.exp(-lam @ expo.T)

    def predict_risk(self, X, task: int, horizon: Optional[float] = None) -> np.ndarray:
        """Single risk score: cumulative hazard up to ``horizon`` (default: grid end)."""
        horizon = self.grid.boundaries[-1] if horizon is None else horizon
        lam = self.hazards(X)[:, task, :]
        return lam @ self.grid.exposure([horizon])[0]


def init_model(
    tasks: Sequence[CodeId],
    grid: TimeGrid,
    input_dim: int,
    kind: str = "linear",
    hidden: Optional[int] = None,
    seed: int = 0,
    labels: Optional[TaskLabelMatrix] = None,
) -> PeannModel:
    """Fresh model; with ``labels`` the bias starts at each task's crude hazard rate."""
    rng = np.random.default_rng(seed)
    out_dim = hidden if hidden is not None else input_dim
    feat = Featurizer.init(kind, input_dim, out_dim, rng)
    K, P = len(tasks), grid.n_pieces
    b = np.zeros(K * P)
    if labels is not None:
        exposure = labels.durations.sum(axis=0)
        n_events = labels.events.sum(axis=0).astype(float)
        for k in range(K):
            # crude rate = events / total follow-up; half an event when none occurred
            rate = max(n_events[k], 0.5) / max(exposure[k], ZERO_EVENT_SHIFT)
            b[k * P:(k + 1) * P] = math.log(rate)
    return PeannModel(feat, np.zeros((K * P, out_dim)), b, grid, tuple(tasks))


def hazards(model: PeannModel, x, task: int) -> np.ndarray:
    """Length-P hazard vector for one feature vector and task index."""
    return model.hazards(np.asarray(x, dtype=float)[None, :])[0, task]


def _check_lam(lam, grid: TimeGrid) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if lam.shape[-1] != grid.n_pieces:
        raise ValueError(f"expected {grid.n_pieces} hazards, got {lam.shape[-1]}")
    if np.any(~(lam > 0)) or not np.all(np.isfinite(lam)):
        raise ValueError("hazards must be positive and finite")
    return lam


def _check_t(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(~(t >= 0)):
        raise ValueError("t must be >= 0")
    return t


def survival(lam, grid: TimeGrid, t):
    """Survival probability at ``t`` (scalar or array) for one hazard vector."""
    lam = _check_lam(lam, grid)
    t = _check_t(t)
    out = np.exp(-grid.exposure(t.ravel()) @ lam).reshape(t.shape)
    return float(out) if out.ndim == 0 else out


def density(lam, grid: TimeGrid, t):
    """Event density ``S(t) * lambda_{p(t)}`` per day."""
    lam = _check_lam(lam, grid)
    t = _check_t(t)
    flat = t.ravel()
    out = (np.exp(-grid.exposure(flat) @ lam) * lam[grid.piece_of(flat)]).reshape(t.shape)
    return float(out) if out.ndim == 0 else out


def _aligned(model: PeannModel, labels: TaskLabelMatrix):
    if labels.mode != "tte":
        raise ValueError(f"nll needs tte labels, got mode {labels.mode!r}")
    if [c.text for c in labels.tasks] != [c.text for c in model.tasks]:
        raise ValueError("label tasks do not match model tasks")
    d = np.array(labels.durations, dtype=float)
    if np.any(d < 0):
        raise ValueError("durations must be >= 0")
    e = labels.events
    d[(d == 0) & e] = ZERO_EVENT_SHIFT
    return d, e


def loss_and_grad(model: PeannModel, X, labels: TaskLabelMatrix, need_grad: bool = True, featurizer: bool = True):
    """Mean NLL over (patient, task) cells and its gradient per parameter."""
    X = model._check_x(X)
    d, e = _aligned(model, labels)
    n, K, P = X.shape[0], model.n_tasks, model.n_pieces
    if X.shape[0] != labels.n_patients:
        raise ValueError("features and labels disagree on patient count")
    M = model.featurizer.forward(X)
    eta = M @ model.head_A.T + model.head_b
    cells = n * K
    loss, g_eta = kernels.pe_loss_grad(d.ravel(), e.ravel(), eta.reshape(cells, P), model.grid.array)
    loss /= cells
    if not need_grad:
        return loss, None
    G = g_eta.reshape(n, K * P) / cells
    grads = {"head.A": G.T @ M, "head.b": G.sum(axis=0)}
    if featurizer:
        fg = model.featurizer.backward(X, M, G @ model.head_A)
        grads["feat.W"], grads["feat.c"] = fg["W"], fg["c"]
    else:
        grads["feat.W"] = np.zeros_like(model.featurizer.W)
        grads["feat.c"] = np.zeros_like(model.featurizer.c)
    return loss, grads


def nll(model: PeannModel, X, labels: TaskLabelMatrix) -> float:
    return loss_and_grad(model, X, labels, need_grad=False)[0]


def nll_grad(model: PeannModel, X, labels: TaskLabelMatrix) -> dict[str, np.ndarray]:
    return loss_and_grad(model, X, labels)[1]


@dataclass
class TrainConfig:
    lr: float = 1e-2
    epochs: int = 50
    batch: Optional[int] = 256
    seed: int = 0
    optimizer: str = "adam"
    clip_norm: float = 10.0
    train_featurizer: bool = True
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0 or self.epochs < 0:
            raise ValueError("lr and epochs must be >= 0")
        if self.batch is not None and self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass
class TrainResult:
    model: object
    curve: list[tuple[int, str, float]] = field(default_factory=list)

    def losses(self, split: str = "train") -> list[float]:
        return [v for _, s, v in self.curve if s == split]


class _Optimizer:
    """SGD or Adam over a dict of arrays, with global-norm gradient clipping."""

    def __init__(self, config: TrainConfig, params: dict[str, np.ndarray]):
        self.cfg = config
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        cfg = self.cfg
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = cfg.clip_norm / norm if cfg.clip_norm and norm > cfg.clip_norm else 1.0
        self.t += 1
        out = {}
        b1, b2 = cfg.betas
        for k, p in params.items():
            g = grads[k] * scale
            if cfg.optimizer == "sgd":
                out[k] = p - cfg.lr * g
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1 ** self.t)
            v_hat = self.v[k] / (1 - b2 ** self.t)
            out[k] = p - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        return out


def _batches(n: int, batch: Optional[int], rng: np.random.Generator) -> list[np.ndarray]:
    if batch is None or batch >= n:
        return [np.arange(n)]
    order = rng.permutation(n)
    return [order[s:s + batch] for s in range(0, n, batch)]


def minibatch_descent(params0, loss_grad, n_train, config: TrainConfig, evaluate, set_params):
    """Shared loop for the PEANN trainer and the adaptation heads.

    ``loss_grad(idx)`` returns ``(loss, grads)`` on rows ``idx`` of the
    training set; ``evaluate()`` returns a list of ``(split, loss)`` pairs.
    """
    rng = np.random.default_rng(config.seed)
    params = {k: np.array(v, dtype=float) for k, v in params0.items()}
    opt = _Optimizer(config, params)
    curve = []
    for epoch in range(1, config.epochs + 1):
        for b_id, idx in enumerate(_batches(n_train, config.batch, rng)):
            loss, grads = loss_grad(idx)
            if not math.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b_id} ({len(idx)} rows)")
            params = opt.step(params, grads)
            set_params(params)
        for split, value in evaluate():
            if not math.isfinite(value):
                raise TrainingError(f"non-finite {split} loss after epoch {epoch}")
            curve.append((epoch, split, value))
    return params, curve


def train(model: PeannModel, cohort: Cohort, labels: TaskLabelMatrix, config: TrainConfig = TrainConfig()) -> TrainResult:
    """Fit ``model`` on the cohort's train split; valid split is monitored.

    The input model is not modified. Batches are drawn from a generator
    seeded with ``config.seed``, so runs are bit-reproducible.
    """
    if cohort.features is None:
        raise ValueError("cohort has no features")
    if tuple(cohort.patient_ids) != tuple(labels.patient_ids):
        raise ValueError("labels rows must follow cohort patient order")
    train_rows = np.flatnonzero(cohort.split_mask("train"))
    valid_rows = np.flatnonzero(cohort.split_mask("valid"))
    if len(train_rows) == 0:
        raise ValueError("train split is empty")
    X = np.asarray(cohort.features)
    X_tr, y_tr = X[train_rows], labels.subset(train_rows)
    X_va, y_va = X[valid_rows], labels.subset(valid_rows)
    work = model.copy()

    def loss_grad(idx):
        return loss_and_grad(work, X_tr[idx], y_tr.subset(idx), featurizer=config.train_featurizer)

    def evaluate():
        out = [("train", nll(work, X_tr, y_tr))]
        if len(valid_rows):
            out.append(("valid", nll(work, X_va, y_va)))
        return out

    _, curve = minibatch_descent(work.params(), loss_grad, len(train_rows), config, evaluate, work.set_params)
    return TrainResult(work, curve)


def _pack(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel(order="C")]}


def _unpack(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=float).reshape(d["shape"])


def save_model(model: PeannModel, path) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "grid": list(model.grid.boundaries),
        "tasks": [c.text for c in model.tasks],
        "featurizer": {"kind": model.featurizer.kind, "W": _pack(model.featurizer.W), "c": _pack(model.featurizer.c)},
        "head": {"A": _pack(model.head_A), "b": _pack(model.head_b)},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_model(path, vocab: Optional[Vocabulary] = None) -> PeannModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: not a version-{MODEL_VERSION} {MODEL_FORMAT} document")
    vocab = vocab if vocab is not None else Vocabulary()
    f = doc["featurizer"]
    return PeannModel(
        Featurizer(f["kind"], _unpack(f["W"]), _unpack(f["c"])),
        _unpack(doc["head"]["A"]),
        _unpack(doc["head"]["b"]),
        TimeGrid(tuple(doc["grid"])),
        tuple(vocab.intern(t) for t in doc["tasks"]),
    )


def write_loss_curve(curve, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,split,nll\n")
        for epoch, split, value in curve:
            fh.write(f"{epoch},{split},{value!r}\n")
