# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Semantics mirror ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()


cdef inline Py_ssize_t _piece(double t, const double[:] b) nogil:
    cdef Py_ssize_t lo = 0, hi = b.shape[0] - 1, mid
    cdef Py_ssize_t n_pieces = b.shape[0] - 1
    # largest p with b[p] <= t, clipped to [0, P-1]
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if b[mid] <= t:
            lo = mid
        else:
            hi = mid
    if b[hi] <= t:
        lo = hi
    if lo > n_pieces - 1:
        lo = n_pieces - 1
    return lo


def piece_exposure(durations, boundaries):
    cdef const double[:] t = np.ascontiguousarray(durations, dtype=np.float64)
    cdef const double[:] b = np.ascontiguousarray(boundaries, dtype=np.float64)
    cdef Py_ssize_t n = t.shape[0], P = b.shape[0] - 1, i, p
    out = np.zeros((n, P), dtype=np.float64)
    cdef double[:, :] o = out
    cdef double x, w
    with nogil:
        for i in range(n):
            for p in range(P):
                x = t[i] - b[p]
                if x <= 0.0:
                    break
                w = b[p + 1] - b[p] if p < P - 1 else INFINITY
                o[i, p] = x if x < w else w
    return out


def piece_index(durations, boundaries):
    cdef const double[:] t = np.ascontiguousarray(durations, dtype=np.float64)
    cdef const double[:] b = np.ascontiguousarray(boundaries, dtype=np.float64)
    cdef Py_ssize_t n = t.shape[0], i
    out = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[:] o = out
    with nogil:
        for i in range(n):
            o[i] = _piece(t[i], b)
    return out


def pe_loss_grad(durations, events, log_haz, boundaries):
    cdef const double[:] t = np.ascontiguousarray(durations, dtype=np.float64)
    cdef const unsigned char[:] ev = np.ascontiguousarray(events, dtype=np.uint8)
    cdef const double[:, :] eta = np.ascontiguousarray(log_haz, dtype=np.float64)
    cdef const double[:] b = np.ascontiguousarray(boundaries, dtype=np.float64)
    cdef Py_ssize_t n = eta.shape[0], P = eta.shape[1], i, p, k
    grad = np.zeros((n, P), dtype=np.float64)
    cdef double[:, :] g = grad
    cdef double loss = 0.0, x, w, e
    with nogil:
        for i in range(n):
            for p in range(P):
                x = t[i] - b[p]
                if x <= 0.0:
                    break
                w = b[p + 1] - b[p] if p < P - 1 else INFINITY
                e = x if x < w else w
                g[i, p] = exp(eta[i, p]) * e
                loss += g[i, p]
            if ev[i]:
                k = _piece(t[i], b)
                loss -= eta[i, k]
                g[i, k] -= 1.0
    return loss, grad


def concordance_counts(time, event, score):
    """Harrell pair counts in O(n log n): sweep times downward over a Fenwick tree of score ranks."""
    time = np.asarray(time, dtype=np.float64)
    cdef Py_ssize_t n = time.shape[0]
    if n == 0:
        return 0, 0, 0
    order = np.argsort(-time, kind="mergesort")
    ranks_all = np.unique(np.asarray(score, dtype=np.float64), return_inverse=True)[1].astype(np.intp) + 1
    cdef const double[:] t = np.ascontiguousarray(time[order])
    cdef const unsigned char[:] ev = np.ascontiguousarray(np.asarray(event, dtype=np.uint8)[order])
    cdef const Py_ssize_t[:] rk = np.ascontiguousarray(ranks_all[order])
    cdef Py_ssize_t m = int(ranks_all.max())
    tree_arr = np.zeros(m + 1, dtype=np.int64)
    cdef long long[:] tree = tree_arr
    cdef Py_ssize_t i, j, g_end, k
    cdef long long conc = 0, tied = 0, comp = 0, added = 0, below, upto
    with nogil:
        i = 0
        while i < n:
            g_end = i
            while g_end < n and t[g_end] == t[i]:
                g_end += 1
            # censored at this time count as later than events at this time
            for j in range(i, g_end):
                if not ev[j]:
                    _bit_add(tree, rk[j], m)
                    added += 1
            for j in range(i, g_end):
                if ev[j]:
                    below = _bit_sum(tree, rk[j] - 1)
                    upto = _bit_sum(tree, rk[j])
                    comp += added
                    conc += below
                    tied += upto - below
            for j in range(i, g_end):
                if ev[j]:
                    _bit_add(tree, rk[j], m)
                    added += 1
            i = g_end
    return int(conc), int(tied), int(comp)


cdef inline void _bit_add(long long[:] tree, Py_ssize_t k, Py_ssize_t m) noexcept nogil:
    while k <= m:
        tree[k] += 1
        k += k & (-k)


cdef inline long long _bit_sum(long long[:] tree, Py_ssize_t k) noexcept nogil:
    cdef long long acc = 0
    while k > 0:
        acc += tree[k]
        k -= k & (-k)
    return acc


def cox_breslow(time, event, risk):
    time = np.asarray(time, dtype=np.float64)
    cdef Py_ssize_t n = time.shape[0], i, j, start
    if n == 0:
        return 0.0, np.zeros(0)
    order = np.argsort(time, kind="mergesort")
    cdef const double[:] t = np.ascontiguousarray(time[order])
    cdef const double[:] r = np.ascontiguousarray(np.asarray(risk, dtype=np.float64)[order])
    cdef const unsigned char[:] d = np.ascontiguousarray(np.asarray(event, dtype=np.uint8)[order])
    w_arr = np.empty(n)
    rs_arr = np.empty(n)
    g_arr = np.empty(n)
    cdef double[:] w = w_arr
    cdef double[:] rs = rs_arr
    cdef double[:] g = g_arr
    cdef double shift = np.max(r), acc = 0.0, nll = 0.0
    with nogil:
        for i in range(n):
            w[i] = exp(r[i] - shift)
        # risk-set sums, constant within tie groups (Breslow)
        i = n - 1
        while i >= 0:
            j = i
            while j > 0 and t[j - 1] == t[i]:
                j -= 1
            for start in range(i, j - 1, -1):
                acc += w[start]
            for start in range(j, i + 1):
                rs[start] = acc
            i = j - 1
        acc = 0.0
        i = 0
        while i < n:
            j = i
            while j + 1 < n and t[j + 1] == t[i]:
                j += 1
            for start in range(i, j + 1):
                if d[start]:
                    acc += 1.0 / rs[start]
                    nll -= r[start] - (log(rs[start]) + shift)
            for start in range(i, j + 1):
                g[start] = w[start] * acc - d[start]
            i = j + 1
    grad = np.empty(n)
    grad[order] = g_arr
    return nll, grad
