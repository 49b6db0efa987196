"""Hot inner-loop kernels with a numba path and a pure-numpy path.

Both implementations of every kernel live side by side (``nb_*`` and
``np_*``) so they can be compared in tests and in ``benchmarks/``.  The
public names (``softmax_rows`` etc.) are bound once at import time:
numba is used when it imports cleanly and ``MHIM_DISABLE_NUMBA`` is unset
or ``0``.
"""

from __future__ import annotations

import math
import os

import numpy as np

_flag = os.environ.get("MHIM_DISABLE_NUMBA", "0").strip().lower()
_WANT_NUMBA = _flag in ("", "0", "false", "no")

try:
    if not _WANT_NUMBA:
        raise ImportError("disabled by MHIM_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


# ---------------------------------------------------------------------------
# row softmax


def np_softmax_rows(x: np.ndarray, temperature: float) -> np.ndarray:
    z = x / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def np_softmax_rows_backward(y: np.ndarray, g: np.ndarray, temperature: float) -> np.ndarray:
    inner = (g * y).sum(axis=1, keepdims=True)
    return y * (g - inner) / temperature


@njit(cache=True)
def nb_softmax_rows(x, temperature):
    n, m = x.shape
    out = np.empty((n, m))
    for i in range(n):
        mx = x[i, 0] / temperature
        for j in range(1, m):
            v = x[i, j] / temperature
            if v > mx:
                mx = v
        s = 0.0
        for j in range(m):
            e = math.exp(x[i, j] / temperature - mx)
            out[i, j] = e
            s += e
        for j in range(m):
            out[i, j] /= s
    return out


@njit(cache=True)
def nb_softmax_rows_backward(y, g, temperature):
    n, m = y.shape
    out = np.empty((n, m))
    for i in range(n):
        inner = 0.0
        for j in range(m):
            inner += g[i, j] * y[i, j]
        for j in range(m):
            out[i, j] = y[i, j] * (g[i, j] - inner) / temperature
    return out


# ---------------------------------------------------------------------------
# optimizer / EMA updates (in place)


def np_adam_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, step):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    p *= 1.0 - lr * weight_decay
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@njit(cache=True)
def nb_adam_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, step):
    pf = p.ravel()
    gf = g.ravel()
    mf = m.ravel()
    vf = v.ravel()
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    shrink = 1.0 - lr * weight_decay
    for i in range(pf.size):
        gi = gf[i]
        mf[i] = beta1 * mf[i] + (1.0 - beta1) * gi
        vf[i] = beta2 * vf[i] + (1.0 - beta2) * (gi * gi)
        pf[i] = pf[i] * shrink - lr * (mf[i] / bc1) / (math.sqrt(vf[i] / bc2) + eps)


def np_ema_update(target, source, momentum):
    target *= momentum
    target += (1.0 - momentum) * source


@njit(cache=True)
def nb_ema_update(target, source, momentum):
    tf = target.ravel()
    sf = source.ravel()
    for i in range(tf.size):
        tf[i] = momentum * tf[i] + (1.0 - momentum) * sf[i]


# ---------------------------------------------------------------------------
# Mann-Whitney pair counting on rank order


def np_mann_whitney_u(scores: np.ndarray, labels: np.ndarray) -> float:
    """Concordant positive/negative pairs, ties counted as one half."""
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    # groups of tied scores
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], s.size]
    pos_in = np.add.reduceat(y, starts)
    neg_in = (ends - starts) - pos_in
    neg_below = np.r_[0, np.cumsum(neg_in)[:-1]]
    return float(np.sum(pos_in * neg_below) + 0.5 * np.sum(pos_in * neg_in))


@njit(cache=True)
def nb_mann_whitney_u(scores, labels):
    order = np.argsort(scores, kind="mergesort")
    n = scores.size
    u = 0.0
    neg_below = 0.0
    i = 0
    while i < n:
        j = i
        pos_in = 0.0
        neg_in = 0.0
        while j < n and scores[order[j]] == scores[order[i]]:
            if labels[order[j]] == 1:
                pos_in += 1.0
            else:
                neg_in += 1.0
            j += 1
        u += pos_in * neg_below + 0.5 * pos_in * neg_in
        neg_below += neg_in
        i = j
    return u


if HAVE_NUMBA:
    softmax_rows = nb_softmax_rows
    softmax_rows_backward = nb_softmax_rows_backward
    adam_update = nb_adam_update
    ema_update_inplace = nb_ema_update
    _mwu = nb_mann_whitney_u
else:
    softmax_rows = np_softmax_rows
    softmax_rows_backward = np_softmax_rows_backward
    adam_update = np_adam_update
    ema_update_inplace = np_ema_update
    _mwu = np_mann_whitney_u


def mann_whitney_u(scores: np.ndarray, labels: np.ndarray) -> float:
    return float(_mwu(np.ascontiguousarray(scores, dtype=np.float64),
                      np.ascontiguousarray(labels, dtype=np.int64)))
