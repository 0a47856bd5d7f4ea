"""Pure numpy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_kernels`` extension; used
when it is not built or when ``TTEKIT_PURE_PYTHON=1``.
"""
import numpy as np

_CHUNK = 512


def piece_exposure(durations, boundaries):
    """Time spent in each piece before ``durations``; last piece is open-ended.

    Returns an ``(N, P)`` array.
    """
    t = np.asarray(durations, dtype=np.float64)[:, None]
    b = np.asarray(boundaries, dtype=np.float64)
    starts = b[:-1][None, :]
    widths = np.diff(b)
    widths = np.concatenate([widths[:-1], [np.inf]])[None, :]
    return np.clip(t - starts, 0.0, widths)


def piece_index(durations, boundaries):
    b = np.asarray(boundaries, dtype=np.float64)
    idx = np.searchsorted(b, np.asarray(durations, dtype=np.float64), side="right") - 1
    return np.clip(idx, 0, len(b) - 2)


def pe_loss_grad(durations, events, log_haz, boundaries):
    """Summed piecewise-exponential NLL and its gradient w.r.t. log-hazards.

    Parameters
    ----------
    durations : (N,) float
    events : (N,) bool or uint8
    log_haz : (N, P) float
    boundaries : (P + 1,) float, ``boundaries[0] == 0``

    Returns
    -------
    loss : float
        ``sum_n [sum_p lambda_np * exposure_np - event_n * log_haz[n, p(T_n)]]``
    grad : (N, P) float
    """
    log_haz = np.asarray(log_haz, dtype=np.float64)
    ev = np.asarray(events).astype(np.float64)
    expo = piece_exposure(durations, boundaries)
    lam = np.exp(log_haz)
    grad = lam * expo
    rows = np.arange(log_haz.shape[0])
    p = piece_index(durations, boundaries)
    loss = float(np.sum(grad) - np.dot(ev, log_haz[rows, p]))
    grad[rows, p] -= ev
    return loss, grad


def concordance_counts(time, event, score):
    """Harrell pair counts: (concordant, tied_risk, comparable).

    A pair is comparable when the earlier time is an event; at equal times an
    event precedes a censoring.
    """
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=bool)
    score = np.asarray(score, dtype=np.float64)
    conc = tied = comp = 0
    ev_idx = np.flatnonzero(event)
    for start in range(0, len(ev_idx), _CHUNK):
        i = ev_idx[start:start + _CHUNK]
        ti = time[i][:, None]
        mask = (time[None, :] > ti) | ((time[None, :] == ti) & ~event[None, :])
        si = score[i][:, None]
        comp += int(mask.sum())
        conc += int((mask & (si > score[None, :])).sum())
        tied += int((mask & (si == score[None, :])).sum())
    return conc, tied, comp


def cox_breslow(time, event, risk):
    """Breslow negative log partial likelihood (summed) and d/d(risk)."""
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=bool)
    risk = np.asarray(risk, dtype=np.float64)
    n = len(time)
    if n == 0:
        return 0.0, np.zeros(0)
    order = np.argsort(time, kind="mergesort")
    t = time[order]
    r = risk[order]
    d = event[order].astype(np.float64)
    shift = r.max()
    w = np.exp(r - shift)
    suffix = np.cumsum(w[::-1])[::-1]
    first = np.searchsorted(t, t, side="left")
    last = np.searchsorted(t, t, side="right") - 1
    risk_sum = suffix[first]
    log_r = np.log(risk_sum) + shift
    nll = float(-np.sum(d * (r - log_r)))
    inv = np.cumsum(d / risk_sum)
    g_sorted = w * inv[last] - d
    grad = np.empty(n)
    grad[order] = g_sorted
    return nll, grad
