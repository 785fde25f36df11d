"""Hot numeric kernels, JIT-compiled with numba when available.

Backend selection happens once at import time from the ``COPER_NUMBA``
environment variable:

* ``COPER_NUMBA=1`` -- require the numba path (ImportError becomes a hard
  failure),
* ``COPER_NUMBA=0`` -- force the pure-numpy fallback,
* unset           -- use numba when importable, numpy otherwise.

Only scalar-loop kernels live here (optimizer update, forward-fill, row
softmax, rank statistic). Matrix products stay on numpy/BLAS everywhere;
a JIT would not beat it. The numpy and numba paths perform the same
per-element arithmetic; row softmax may differ from numpy by a few ulps
because numpy reduces pairwise. ``benchmarks/bench_kernels.py`` times the
two paths side by side.
"""

from __future__ import annotations

import math
import os

import numpy as np

__all__ = [
    "BACKEND",
    "USING_NUMBA",
    "adam_update",
    "carry_forward_fill",
    "softmax_rows",
    "softmax_rows_vjp",
    "rank_auc",
    "impl_pairs",
]


def _pick_backend() -> str:
    flag = os.environ.get("COPER_NUMBA", "").strip().lower()
    if flag in ("0", "false", "no", "off"):
        return "numpy"
    try:
        import numba  # noqa: F401
        have = True
    except ImportError:
        have = False
    if flag in ("1", "true", "yes", "on"):
        if not have:
            raise RuntimeError("COPER_NUMBA=1 but numba is not importable")
        return "numba"
    return "numba" if have else "numpy"


BACKEND = _pick_backend()
USING_NUMBA = BACKEND == "numba"


# ---------------------------------------------------------------------------
# pure-numpy implementations (always defined; fallback + benchmark reference)
# ---------------------------------------------------------------------------

def _adam_update_np(p, g, m, v, step, lr, beta1, beta2, eps):
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def _carry_forward_fill_np(values, present):
    n, t = present.shape
    idx = np.where(present, np.arange(t)[None, :], 0)
    idx = np.maximum.accumulate(idx, axis=1)
    return values[np.arange(n)[:, None], idx]


def _softmax_rows_np(x):
    mx = np.max(x, axis=1)
    if np.isneginf(mx).any():
        raise ValueError("softmax: a row is entirely -inf (fully masked)")
    y = np.exp(x - mx[:, None])
    y /= y.sum(axis=1)[:, None]
    return y


def _softmax_rows_vjp_np(y, gy):
    dot = (y * gy).sum(axis=1)
    return y * (gy - dot[:, None])


def _rank_auc_np(scores, labels):
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    start = 0
    n = scores.size
    while start < n:
        stop = start + 1
        while stop < n and sorted_scores[stop] == sorted_scores[start]:
            stop += 1
        # 1-based average rank over the tie group
        ranks[order[start:stop]] = 0.5 * (start + 1 + stop)
        start = stop
    npos = int(labels.sum())
    nneg = n - npos
    pos_rank_sum = ranks[labels == 1].sum()
    return (pos_rank_sum - npos * (npos + 1) / 2.0) / (npos * nneg)


# ---------------------------------------------------------------------------
# numba implementations (defined whenever numba imports; compiled lazily)
# ---------------------------------------------------------------------------

try:
    from numba import njit

    @njit(cache=True)
    def _adam_update_nb(p, g, m, v, step, lr, beta1, beta2, eps):
        bc1 = 1.0 - beta1 ** step
        bc2 = 1.0 - beta2 ** step
        for k in range(p.size):
            mk = beta1 * m[k] + (1.0 - beta1) * g[k]
            vk = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k]
            m[k] = mk
            v[k] = vk
            p[k] -= lr * (mk / bc1) / (math.sqrt(vk / bc2) + eps)

    @njit(cache=True)
    def _carry_forward_fill_nb(values, present):
        n, t, i = values.shape
        out = np.empty_like(values)
        for s in range(n):
            last = 0
            for k in range(t):
                if present[s, k]:
                    last = k
                for f in range(i):
                    out[s, k, f] = values[s, last, f]
        return out

    @njit(cache=True)
    def _softmax_rows_nb(x):
        r, c = x.shape
        y = np.empty_like(x)
        for i in range(r):
            mx = -np.inf
            for j in range(c):
                if x[i, j] > mx:
                    mx = x[i, j]
            if mx == -np.inf:
                raise ValueError("softmax: a row is entirely -inf (fully masked)")
            s = 0.0
            for j in range(c):
                e = math.exp(x[i, j] - mx)
                y[i, j] = e
                s += e
            for j in range(c):
                y[i, j] /= s
        return y

    @njit(cache=True)
    def _softmax_rows_vjp_nb(y, gy):
        r, c = y.shape
        gx = np.empty_like(y)
        for i in range(r):
            dot = 0.0
            for j in range(c):
                dot += y[i, j] * gy[i, j]
            for j in range(c):
                gx[i, j] = y[i, j] * (gy[i, j] - dot)
        return gx

    @njit(cache=True)
    def _rank_auc_nb(scores, labels):
        n = scores.size
        order = np.argsort(scores)
        ranks = np.empty(n, dtype=np.float64)
        start = 0
        while start < n:
            stop = start + 1
            while stop < n and scores[order[stop]] == scores[order[start]]:
                stop += 1
            avg = 0.5 * (start + 1 + stop)
            for k in range(start, stop):
                ranks[order[k]] = avg
            start = stop
        npos = 0
        pos_rank_sum = 0.0
        for k in range(n):
            if labels[k] == 1:
                npos += 1
                pos_rank_sum += ranks[k]
        nneg = n - npos
        return (pos_rank_sum - npos * (npos + 1) / 2.0) / (npos * nneg)

    _have_numba_impls = True
except ImportError:
    _have_numba_impls = False


if USING_NUMBA:
    adam_update = _adam_update_nb
    carry_forward_fill = _carry_forward_fill_nb
    softmax_rows = _softmax_rows_nb
    softmax_rows_vjp = _softmax_rows_vjp_nb
    rank_auc = _rank_auc_nb
else:
    adam_update = _adam_update_np
    carry_forward_fill = _carry_forward_fill_np
    softmax_rows = _softmax_rows_np
    softmax_rows_vjp = _softmax_rows_vjp_np
    rank_auc = _rank_auc_np


def impl_pairs():
    """(numpy_fn, numba_fn_or_None) per kernel, for tests and benchmarks."""
    pairs = {
        "adam_update": (_adam_update_np, None),
        "carry_forward_fill": (_carry_forward_fill_np, None),
        "softmax_rows": (_softmax_rows_np, None),
        "softmax_rows_vjp": (_softmax_rows_vjp_np, None),
        "rank_auc": (_rank_auc_np, None),
    }
    if _have_numba_impls:
        pairs["adam_update"] = (_adam_update_np, _adam_update_nb)
        pairs["carry_forward_fill"] = (_carry_forward_fill_np, _carry_forward_fill_nb)
        pairs["softmax_rows"] = (_softmax_rows_np, _softmax_rows_nb)
        pairs["softmax_rows_vjp"] = (_softmax_rows_vjp_np, _softmax_rows_vjp_nb)
        pairs["rank_auc"] = (_rank_auc_np, _rank_auc_nb)
    return pairs
