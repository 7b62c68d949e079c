"""Hot inner loops, each with a pure-numpy path and a numba path.

The numba path is used when numba imports cleanly and ``NAR_USE_NUMBA`` is not
set to ``0``. Both paths agree to floating-point rounding; each is deterministic
on its own, so reproducibility guarantees hold per backend.
"""
from __future__ import annotations

import os

import numpy as np

__all__ = [
    "BACKEND",
    "bin_counts",
    "kendall_counts",
    "layernorm_backward",
    "layernorm_forward",
    "pairwise_logistic",
]


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------

def _np_layernorm_forward(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd


def _np_layernorm_backward(dy, xhat, rstd, gain):
    lead = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=lead)
    dbias = dy.sum(axis=lead)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = rstd * (dxhat - m1 - xhat * m2)
    return dx, dgain, dbias


def _np_pairwise_logistic(yhat, y):
    k = yhat.shape[0]
    m, n = np.triu_indices(k, 1)
    s = np.sign(y[m] - y[n])
    keep = s != 0
    m, n, s = m[keep], n[keep], s[keep]
    eps = (yhat[m] - yhat[n]) * s
    loss = np.logaddexp(0.0, -eps).sum()
    # d psi / d eps = -sigmoid(-eps)
    w = -0.5 * (1.0 - np.tanh(eps / 2.0)) * s
    grad = np.zeros(k)
    np.add.at(grad, m, w)
    np.add.at(grad, n, -w)
    return float(loss), grad


def _np_kendall_counts(scores, truths):
    i, j = np.triu_indices(scores.shape[0], 1)
    dt = np.sign(truths[i] - truths[j])
    ds = np.sign(scores[i] - scores[j])
    counted = dt != 0
    prod = (dt * ds)[counted]
    return int((prod > 0).sum()), int((prod < 0).sum()), int(counted.sum())


def _np_bin_counts(values, lo, step, q):
    idx = np.ceil((values - lo) / step).astype(np.int64)
    idx = np.clip(idx, 1, q) - 1
    return np.bincount(idx, minlength=q).astype(np.int64)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

def _build_numba():
    from numba import njit

    @njit(cache=True)
    def layernorm_forward_2d(x, gain, bias, eps):
        rows, d = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty((rows, 1), dtype=x.dtype)
        for r in range(rows):
            mu = 0.0
            for c in range(d):
                mu += x[r, c]
            mu /= d
            var = 0.0
            for c in range(d):
                t = x[r, c] - mu
                var += t * t
            var /= d
            rs = 1.0 / np.sqrt(var + eps)
            rstd[r, 0] = rs
            for c in range(d):
                h = (x[r, c] - mu) * rs
                xhat[r, c] = h
                out[r, c] = h * gain[c] + bias[c]
        return out, xhat, rstd

    @njit(cache=True)
    def layernorm_backward_2d(dy, xhat, rstd, gain):
        rows, d = dy.shape
        dx = np.empty_like(dy)
        dgain = np.zeros(d, dtype=dy.dtype)
        dbias = np.zeros(d, dtype=dy.dtype)
        for r in range(rows):
            m1 = 0.0
            m2 = 0.0
            for c in range(d):
                g = dy[r, c] * gain[c]
                m1 += g
                m2 += g * xhat[r, c]
                dgain[c] += dy[r, c] * xhat[r, c]
                dbias[c] += dy[r, c]
            m1 /= d
            m2 /= d
            rs = rstd[r, 0]
            for c in range(d):
                dx[r, c] = rs * (dy[r, c] * gain[c] - m1 - xhat[r, c] * m2)
        return dx, dgain, dbias

    @njit(cache=True)
    def pairwise_logistic(yhat, y):
        k = yhat.shape[0]
        grad = np.zeros(k)
        loss = 0.0
        for m in range(k - 1):
            for n in range(m + 1, k):
                dy = y[m] - y[n]
                if dy == 0.0:
                    continue
                s = 1.0 if dy > 0.0 else -1.0
                e = (yhat[m] - yhat[n]) * s
                if e > 0.0:
                    loss += np.log1p(np.exp(-e))
                else:
                    loss += -e + np.log1p(np.exp(e))
                w = -0.5 * (1.0 - np.tanh(e / 2.0)) * s
                grad[m] += w
                grad[n] -= w
        return loss, grad

    @njit(cache=True)
    def kendall_counts(scores, truths):
        n = scores.shape[0]
        conc = 0
        disc = 0
        counted = 0
        for i in range(n - 1):
            for j in range(i + 1, n):
                dt = truths[i] - truths[j]
                if dt == 0.0:
                    continue
                counted += 1
                p = dt * (scores[i] - scores[j])
                if p > 0.0:
                    conc += 1
                elif p < 0.0:
                    disc += 1
        return conc, disc, counted

    @njit(cache=True)
    def bin_counts(values, lo, step, q):
        counts = np.zeros(q, dtype=np.int64)
        for v in values:
            b = int(np.ceil((v - lo) / step))
            if b < 1:
                b = 1
            elif b > q:
                b = q
            counts[b - 1] += 1
        return counts

    def ln_fwd(x, gain, bias, eps):
        shape = x.shape
        out, xhat, rstd = layernorm_forward_2d(
            np.ascontiguousarray(x).reshape(-1, shape[-1]), gain, bias, eps)
        return (out.reshape(shape), xhat.reshape(shape),
                rstd.reshape(shape[:-1] + (1,)))

    def ln_bwd(dy, xhat, rstd, gain):
        shape = dy.shape
        dx, dgain, dbias = layernorm_backward_2d(
            np.ascontiguousarray(dy).reshape(-1, shape[-1]),
            xhat.reshape(-1, shape[-1]), rstd.reshape(-1, 1), gain)
        return dx.reshape(shape), dgain, dbias

    def pl(yhat, y):
        loss, grad = pairwise_logistic(np.ascontiguousarray(yhat, dtype=np.float64),
                                       np.ascontiguousarray(y, dtype=np.float64))
        return float(loss), grad

    def kc(scores, truths):
        c, d, n = kendall_counts(np.ascontiguousarray(scores, dtype=np.float64),
                                 np.ascontiguousarray(truths, dtype=np.float64))
        return int(c), int(d), int(n)

    def bc(values, lo, step, q):
        return bin_counts(np.ascontiguousarray(values, dtype=np.float64),
                          float(lo), float(step), int(q))

    return {
        "layernorm_forward": ln_fwd,
        "layernorm_backward": ln_bwd,
        "pairwise_logistic": pl,
        "kendall_counts": kc,
        "bin_counts": bc,
    }


NUMPY_KERNELS = {
    "layernorm_forward": _np_layernorm_forward,
    "layernorm_backward": _np_layernorm_backward,
    "pairwise_logistic": _np_pairwise_logistic,
    "kendall_counts": _np_kendall_counts,
    "bin_counts": _np_bin_counts,
}

NUMBA_KERNELS: dict | None
try:
    NUMBA_KERNELS = _build_numba()
except ImportError:
    NUMBA_KERNELS = None

if NUMBA_KERNELS is not None and os.environ.get("NAR_USE_NUMBA", "1") != "0":
    BACKEND = "numba"
    _active = NUMBA_KERNELS
else:
    BACKEND = "numpy"
    _active = NUMPY_KERNELS

layernorm_forward = _active["layernorm_forward"]
layernorm_backward = _active["layernorm_backward"]
pairwise_logistic = _active["pairwise_logistic"]
kendall_counts = _active["kendall_counts"]
bin_counts = _active["bin_counts"]
