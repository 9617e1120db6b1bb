"""Hot numeric kernels with numba-jitted and pure-numpy twins.

The fused kernels here (LSTM gate pointwise math, gold-token log-probability,
Adam update) sit inside the per-step training loop and dominate runtime at
small batch sizes. Backend selection:

    GENREF_NUMBA=1   force numba (raises if numba is missing)
    GENREF_NUMBA=0   force the pure-numpy fallback
    unset            numba if importable, numpy otherwise

Both twins of every kernel stay importable so the benchmark CLI can time them
against each other regardless of the active backend.
"""

import math
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn

        return deco


_env = os.environ.get("GENREF_NUMBA", "").strip().lower()
if _env in ("1", "true", "yes"):
    if not HAS_NUMBA:
        raise ImportError("GENREF_NUMBA=1 but numba is not importable")
    USE_NUMBA = True
elif _env in ("0", "false", "no"):
    USE_NUMBA = False
else:
    USE_NUMBA = HAS_NUMBA


# ---------------------------------------------------------------------------
# LSTM gate pointwise block: z holds pre-activations [i | f | g | o].
# ---------------------------------------------------------------------------

def lstm_pointwise_np(z, c):
    h = z.shape[1] // 4
    i = 1.0 / (1.0 + np.exp(-z[:, :h]))
    f = 1.0 / (1.0 + np.exp(-z[:, h:2 * h]))
    g = np.tanh(z[:, 2 * h:3 * h])
    o = 1.0 / (1.0 + np.exp(-z[:, 3 * h:]))
    c2 = f * c + i * g
    tc = np.tanh(c2)
    hh = o * tc
    return hh, c2, i, f, g, o, tc


@njit(cache=True)
def lstm_pointwise_nb(z, c):  # pragma: no cover - exercised via backend parity test
    n, h4 = z.shape
    h = h4 // 4
    i = np.empty((n, h))
    f = np.empty((n, h))
    g = np.empty((n, h))
    o = np.empty((n, h))
    c2 = np.empty((n, h))
    tc = np.empty((n, h))
    hh = np.empty((n, h))
    for r in range(n):
        for j in range(h):
            i[r, j] = 1.0 / (1.0 + math.exp(-z[r, j]))
            f[r, j] = 1.0 / (1.0 + math.exp(-z[r, h + j]))
            g[r, j] = math.tanh(z[r, 2 * h + j])
            o[r, j] = 1.0 / (1.0 + math.exp(-z[r, 3 * h + j]))
            c2[r, j] = f[r, j] * c[r, j] + i[r, j] * g[r, j]
            tc[r, j] = math.tanh(c2[r, j])
            hh[r, j] = o[r, j] * tc[r, j]
    return hh, c2, i, f, g, o, tc


def lstm_pointwise_value_np(z, c):
    hh, c2, _, _, _, _, _ = lstm_pointwise_np(z, c)
    return hh, c2


@njit(cache=True)
def lstm_pointwise_value_nb(z, c):  # pragma: no cover
    n, h4 = z.shape
    h = h4 // 4
    c2 = np.empty((n, h))
    hh = np.empty((n, h))
    for r in range(n):
        for j in range(h):
            i = 1.0 / (1.0 + math.exp(-z[r, j]))
            f = 1.0 / (1.0 + math.exp(-z[r, h + j]))
            g = math.tanh(z[r, 2 * h + j])
            o = 1.0 / (1.0 + math.exp(-z[r, 3 * h + j]))
            c2[r, j] = f * c[r, j] + i * g
            hh[r, j] = o * math.tanh(c2[r, j])
    return hh, c2


def lstm_bwd_from_h_np(gh, i, f, g, o, tc, c):
    dc2 = gh * o * (1.0 - tc * tc)
    gz = np.empty((gh.shape[0], 4 * gh.shape[1]))
    h = gh.shape[1]
    gz[:, :h] = dc2 * g * i * (1.0 - i)
    gz[:, h:2 * h] = dc2 * c * f * (1.0 - f)
    gz[:, 2 * h:3 * h] = dc2 * i * (1.0 - g * g)
    gz[:, 3 * h:] = gh * tc * o * (1.0 - o)
    gc = dc2 * f
    return gz, gc


@njit(cache=True)
def lstm_bwd_from_h_nb(gh, i, f, g, o, tc, c):  # pragma: no cover
    n, h = gh.shape
    gz = np.empty((n, 4 * h))
    gc = np.empty((n, h))
    for r in range(n):
        for j in range(h):
            dc2 = gh[r, j] * o[r, j] * (1.0 - tc[r, j] * tc[r, j])
            gz[r, j] = dc2 * g[r, j] * i[r, j] * (1.0 - i[r, j])
            gz[r, h + j] = dc2 * c[r, j] * f[r, j] * (1.0 - f[r, j])
            gz[r, 2 * h + j] = dc2 * i[r, j] * (1.0 - g[r, j] * g[r, j])
            gz[r, 3 * h + j] = gh[r, j] * tc[r, j] * o[r, j] * (1.0 - o[r, j])
            gc[r, j] = dc2 * f[r, j]
    return gz, gc


def lstm_bwd_from_c_np(gc2, i, f, g, c):
    h = gc2.shape[1]
    gz = np.empty((gc2.shape[0], 4 * h))
    gz[:, :h] = gc2 * g * i * (1.0 - i)
    gz[:, h:2 * h] = gc2 * c * f * (1.0 - f)
    gz[:, 2 * h:3 * h] = gc2 * i * (1.0 - g * g)
    gz[:, 3 * h:] = 0.0
    gc = gc2 * f
    return gz, gc


@njit(cache=True)
def lstm_bwd_from_c_nb(gc2, i, f, g, c):  # pragma: no cover
    n, h = gc2.shape
    gz = np.zeros((n, 4 * h))
    gc = np.empty((n, h))
    for r in range(n):
        for j in range(h):
            gz[r, j] = gc2[r, j] * g[r, j] * i[r, j] * (1.0 - i[r, j])
            gz[r, h + j] = gc2[r, j] * c[r, j] * f[r, j] * (1.0 - f[r, j])
            gz[r, 2 * h + j] = gc2[r, j] * i[r, j] * (1.0 - g[r, j] * g[r, j])
            gc[r, j] = gc2[r, j] * f[r, j]
    return gz, gc


# ---------------------------------------------------------------------------
# Log-probability of the gold token per row, numerically stable.
# ---------------------------------------------------------------------------

def gold_logp_np(logits, ids):
    m = logits.max(axis=1)
    e = np.exp(logits - m[:, None])
    s = e.sum(axis=1)
    lp = logits[np.arange(logits.shape[0]), ids] - m - np.log(s)
    probs = e / s[:, None]
    return lp, probs


@njit(cache=True)
def gold_logp_nb(logits, ids):  # pragma: no cover
    n, v = logits.shape
    lp = np.empty(n)
    probs = np.empty((n, v))
    for r in range(n):
        m = logits[r, 0]
        for j in range(1, v):
            if logits[r, j] > m:
                m = logits[r, j]
        s = 0.0
        for j in range(v):
            probs[r, j] = math.exp(logits[r, j] - m)
            s += probs[r, j]
        for j in range(v):
            probs[r, j] /= s
        lp[r] = logits[r, ids[r]] - m - math.log(s)
    return lp, probs


def gold_logp_value_np(logits, ids):
    m = logits.max(axis=1)
    s = np.exp(logits - m[:, None]).sum(axis=1)
    return logits[np.arange(logits.shape[0]), ids] - m - np.log(s)


@njit(cache=True)
def gold_logp_value_nb(logits, ids):  # pragma: no cover
    n, v = logits.shape
    lp = np.empty(n)
    for r in range(n):
        m = logits[r, 0]
        for j in range(1, v):
            if logits[r, j] > m:
                m = logits[r, j]
        s = 0.0
        for j in range(v):
            s += math.exp(logits[r, j] - m)
        lp[r] = logits[r, ids[r]] - m - math.log(s)
    return lp


def gold_logp_bwd_np(probs, ids, glp):
    glogits = (-glp[:, None]) * probs
    glogits[np.arange(probs.shape[0]), ids] += glp
    return glogits


@njit(cache=True)
def gold_logp_bwd_nb(probs, ids, glp):  # pragma: no cover
    n, v = probs.shape
    glogits = np.empty((n, v))
    for r in range(n):
        for j in range(v):
            glogits[r, j] = -glp[r] * probs[r, j]
        glogits[r, ids[r]] += glp[r]
    return glogits


# ---------------------------------------------------------------------------
# Softmax over the last axis (2-D case is the hot one).
# ---------------------------------------------------------------------------

def softmax_rows_np(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


@njit(cache=True)
def softmax_rows_nb(x):  # pragma: no cover
    n, v = x.shape
    out = np.empty((n, v))
    for r in range(n):
        m = x[r, 0]
        for j in range(1, v):
            if x[r, j] > m:
                m = x[r, j]
        s = 0.0
        for j in range(v):
            out[r, j] = math.exp(x[r, j] - m)
            s += out[r, j]
        for j in range(v):
            out[r, j] /= s
    return out


# ---------------------------------------------------------------------------
# Adam parameter update, fused and in-place on flat views.
# ---------------------------------------------------------------------------

def adam_step_np(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2, gscale):
    gs = g * gscale
    m *= beta1
    m += (1.0 - beta1) * gs
    v *= beta2
    v += (1.0 - beta2) * gs * gs
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@njit(cache=True)
def adam_step_nb(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2, gscale):  # pragma: no cover
    for j in range(p.shape[0]):
        gs = g[j] * gscale
        m[j] = beta1 * m[j] + (1.0 - beta1) * gs
        v[j] = beta2 * v[j] + (1.0 - beta2) * gs * gs
        p[j] -= lr * (m[j] / bc1) / (math.sqrt(v[j] / bc2) + eps)


# ---------------------------------------------------------------------------
# Backend dispatch. Each entry: name -> (numpy twin, numba twin).
# ---------------------------------------------------------------------------

TWINS = {
    "lstm_pointwise": (lstm_pointwise_np, lstm_pointwise_nb),
    "lstm_pointwise_value": (lstm_pointwise_value_np, lstm_pointwise_value_nb),
    "lstm_bwd_from_h": (lstm_bwd_from_h_np, lstm_bwd_from_h_nb),
    "lstm_bwd_from_c": (lstm_bwd_from_c_np, lstm_bwd_from_c_nb),
    "gold_logp": (gold_logp_np, gold_logp_nb),
    "gold_logp_value": (gold_logp_value_np, gold_logp_value_nb),
    "gold_logp_bwd": (gold_logp_bwd_np, gold_logp_bwd_nb),
    "softmax_rows": (softmax_rows_np, softmax_rows_nb),
    "adam_step": (adam_step_np, adam_step_nb),
}

_idx = 1 if USE_NUMBA else 0
lstm_pointwise = TWINS["lstm_pointwise"][_idx]
lstm_pointwise_value = TWINS["lstm_pointwise_value"][_idx]
lstm_bwd_from_h = TWINS["lstm_bwd_from_h"][_idx]
lstm_bwd_from_c = TWINS["lstm_bwd_from_c"][_idx]
gold_logp = TWINS["gold_logp"][_idx]
gold_logp_value = TWINS["gold_logp_value"][_idx]
gold_logp_bwd = TWINS["gold_logp_bwd"][_idx]
softmax_rows = TWINS["softmax_rows"][_idx]
adam_step = TWINS["adam_step"][_idx]

BACKEND = "numba" if USE_NUMBA else "numpy"


def softmax_lastaxis(x):
    """Stable softmax over the last axis for any ndim (numpy path only)."""
    if x.ndim == 2 and x.dtype == np.float64 and USE_NUMBA:
        return softmax_rows(np.ascontiguousarray(x))
    return softmax_rows_np(x)
