#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Minimal differentiable numeric kernel.

Matrices are plain 2-D numpy arrays. Every differentiable kernel comes as a
forward function plus a ``*_backward`` function that takes the upstream
gradient and the forward inputs (or the cache the forward returned),
accumulates into ``Param.grad`` for trainable parameters and returns the
gradient with respect to its matrix inputs.

Two precisions exist: ``run`` (float32) and ``test`` (float64, used by the
finite-difference harness).
"""

import contextlib
import logging

import numpy as np

from src.config import RUN_DTYPE, TEST_DTYPE
from src.errors import DimensionError, InputError, NumericError

logger = logging.getLogger(__name__)

_PRECISIONS = {"run": np.dtype(RUN_DTYPE), "test": np.dtype(TEST_DTYPE)}
_dtype = _PRECISIONS["run"]


def set_precision(mode):
    """Switch the dtype new Params and matrices are created with."""
    global _dtype
    if mode not in _PRECISIONS:
        raise InputError(f"unknown precision {mode!r}, expected 'run' or 'test'")
    _dtype = _PRECISIONS[mode]


def get_dtype():
    return _dtype


def is_test_mode():
    return _dtype == _PRECISIONS["test"]


@contextlib.contextmanager
def precision(mode):
    previous = _dtype
    set_precision(mode)
    try:
        yield
    finally:
        globals()["_dtype"] = previous


def as_matrix(data, check_finite=True):
    """Convert ``data`` to a 2-D array of the current dtype."""
    m = np.asarray(data, dtype=_dtype)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got an array of shape {m.shape}")
    if check_finite and m.size and not np.all(np.isfinite(m)):
        raise NumericError("matrix contains non-finite entries")
    return m


class Param:
    """A weight matrix with its gradient and a trainable flag."""

    __slots__ = ("value", "grad", "trainable")

    def __init__(self, value, trainable=True):
        self.value = as_matrix(value).copy()
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def accumulate(self, g):
        if self.trainable:
            self.grad += g

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        flag = "trainable" if self.trainable else "frozen"
        return f"Param({self.value.shape[0]}x{self.value.shape[1]}, {flag})"


def normal_param(rng, rows, cols, std=None, trainable=True):
    """Gaussian init; ``std`` defaults to 1/sqrt(rows) (fan-in)."""
    if std is None:
        std = 1.0 / np.sqrt(max(rows, 1))
    return Param(rng.normal(0.0, std, size=(rows, cols)), trainable=trainable)


def zeros_param(rows, cols, trainable=True):
    return Param(np.zeros((rows, cols)), trainable=trainable)


def ones_param(rows, cols, trainable=True):
    return Param(np.ones((rows, cols)), trainable=trainable)


def _require_width(x, width, what):
    if x.ndim != 2 or x.shape[1] != width:
        raise DimensionError(f"{what}: expected width {width}, got shape {x.shape}")


# ---------------------------------------------------------------------------
# linear maps and pointwise functions
# ---------------------------------------------------------------------------

def linear(x, W, b=None):
    """``x @ W (+ b)`` with ``b`` broadcast over rows."""
    _require_width(x, W.value.shape[0], "linear")
    out = x @ W.value
    if b is not None:
        if b.value.shape != (1, W.value.shape[1]):
            raise DimensionError(f"linear: bias shape {b.value.shape} does not match {W.value.shape}")
        out = out + b.value
    return out


def linear_backward(dout, x, W, b=None):
    W.accumulate(x.T @ dout)
    if b is not None:
        b.accumulate(dout.sum(axis=0, keepdims=True))
    return dout @ W.value.T


def _softmax_last(x):
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_last_backward(dy, y):
    return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))


def softmax_rows(x):
    """Row-wise softmax, max-shifted."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise DimensionError(f"softmax_rows: expected a non-empty matrix, got {x.shape}")
    return _softmax_last(x)


def softmax_rows_backward(dy, y):
    return _softmax_last_backward(dy, y)


def log_softmax_rows(x):
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def sigmoid(x):
    # tanh form avoids overflow in exp for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * sigmoid(x)


def silu_backward(dout, x):
    s = sigmoid(x)
    return dout * (s * (1.0 + x * (1.0 - s)))


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_backward(dout, x):
    return dout * sigmoid(x)


# ---------------------------------------------------------------------------
# RMSNorm
# ---------------------------------------------------------------------------

class RmsNormParams:
    """Elementwise scale ``W_R`` and the epsilon inside the mean."""

    def __init__(self, width, eps=1e-6, trainable=True):
        self.weight = ones_param(1, width, trainable=trainable)
        self.eps = eps

    @property
    def width(self):
        return self.weight.value.shape[1]

    def params(self):
        return [("weight", self.weight)]


def rms_norm_forward(r, p):
    _require_width(r, p.width, "rms_norm")
    ms = np.mean(r * r, axis=1, keepdims=True) + p.eps
    with np.errstate(divide="ignore"):
        inv = np.where(ms > 0.0, 1.0 / np.sqrt(np.where(ms > 0.0, ms, 1.0)), 0.0)
    normed = r * inv
    return normed * p.weight.value, (normed, inv)


def rms_norm(r, p):
    """``r / sqrt(mean(r^2 + eps)) * W_R`` per row."""
    return rms_norm_forward(r, p)[0]


def rms_norm_backward(dout, p, cache):
    normed, inv = cache
    p.weight.accumulate(np.sum(dout * normed, axis=0, keepdims=True))
    dn = dout * p.weight.value
    return inv * (dn - normed * np.mean(dn * normed, axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# multi-head attention
# ---------------------------------------------------------------------------

class AttentionWeights:
    """
    Bias-free multi-head attention weights.

    The per-head projections ``W_i^Q``, ``W_i^K``, ``W_i^V`` (each D x D/h)
    are stored side by side as one D x D matrix per role; head ``i`` owns
    columns ``[i*D/h, (i+1)*D/h)``.
    """

    def __init__(self, wq, wk, wv, wo, heads):
        width = wq.value.shape[0]
        if width % heads:
            raise DimensionError(f"width {width} not divisible by {heads} heads")
        for w in (wq, wk, wv, wo):
            if w.value.shape != (width, width):
                raise DimensionError(f"attention weight shape {w.value.shape} != ({width}, {width})")
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo
        self.heads = heads
        self.width = width

    @classmethod
    def init(cls, width, heads, rng, std=None, out_std=None, trainable=True):
        std = std if std is not None else 1.0 / np.sqrt(width)
        out_std = out_std if out_std is not None else std
        return cls(
            normal_param(rng, width, width, std, trainable),
            normal_param(rng, width, width, std, trainable),
            normal_param(rng, width, width, std, trainable),
            normal_param(rng, width, width, out_std, trainable),
            heads,
        )

    @classmethod
    def zeros(cls, width, heads, trainable=True):
        return cls(*(zeros_param(width, width, trainable) for _ in range(4)), heads)

    @property
    def head_dim(self):
        return self.width // self.heads

    @property
    def scale(self):
        return np.sqrt(self.head_dim)

    def params(self):
        return [("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)]


def causal_mask(n):
    """Boolean n x n mask, True where row i may attend to column j (j <= i)."""
    return np.tril(np.ones((n, n), dtype=bool))


def _split_heads(x, heads):
    n, width = x.shape
    return x.reshape(n, heads, width // heads).transpose(1, 0, 2)


def _merge_heads(x):
    heads, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, heads * dh)


def mha_forward(X, Y, w, mask=None):
    """Multi-head attention of queries ``X`` over keys/values ``Y``."""
    _require_width(X, w.width, "mha queries")
    _require_width(Y, w.width, "mha keys")
    q = _split_heads(X @ w.wq.value, w.heads)
    k = _split_heads(Y @ w.wk.value, w.heads)
    v = _split_heads(Y @ w.wv.value, w.heads)
    scores = q @ k.transpose(0, 2, 1) / w.scale
    if mask is not None:
        if mask.shape != (X.shape[0], Y.shape[0]):
            raise DimensionError(f"mask shape {mask.shape} != {(X.shape[0], Y.shape[0])}")
        scores = np.where(mask[None, :, :], scores, -np.inf)
    attn = _softmax_last(scores)
    concat = _merge_heads(attn @ v)
    out = concat @ w.wo.value
    return out, (X, Y, q, k, v, attn, concat)


def mha(X, Y, w, mask=None):
    return mha_forward(X, Y, w, mask)[0]


def mha_backward(dout, w, cache):
    """Returns ``(dX, dY)``; for self-attention the caller adds them."""
    X, Y, q, k, v, attn, concat = cache
    w.wo.accumulate(concat.T @ dout)
    dh = _split_heads(dout @ w.wo.value.T, w.heads)
    dattn = dh @ v.transpose(0, 2, 1)
    dv = attn.transpose(0, 2, 1) @ dh
    dscores = _softmax_last_backward(dattn, attn) / w.scale
    dq = _merge_heads(dscores @ k)
    dk = _merge_heads(dscores.transpose(0, 2, 1) @ q)
    dv = _merge_heads(dv)
    w.wq.accumulate(X.T @ dq)
    w.wk.accumulate(Y.T @ dk)
    w.wv.accumulate(Y.T @ dv)
    dX = dq @ w.wq.value.T
    dY = dk @ w.wk.value.T + dv @ w.wv.value.T
    return dX, dY


# ---------------------------------------------------------------------------
# feed-forward network
# ---------------------------------------------------------------------------

class FfnWeights:
    def __init__(self, w1, b1, w2, b2):
        if w1.value.shape[1] != w2.value.shape[0] or w1.value.shape[0] != w2.value.shape[1]:
            raise DimensionError(f"ffn shapes {w1.value.shape} / {w2.value.shape} do not chain")
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @classmethod
    def init(cls, width, hidden, rng, out_std=None, trainable=True):
        out_std = out_std if out_std is not None else 1.0 / np.sqrt(hidden)
        return cls(
            normal_param(rng, width, hidden, trainable=trainable),
            zeros_param(1, hidden, trainable),
            normal_param(rng, hidden, width, out_std, trainable),
            zeros_param(1, width, trainable),
        )

    @classmethod
    def zeros(cls, width, hidden, trainable=True):
        return cls(zeros_param(width, hidden, trainable), zeros_param(1, hidden, trainable),
                   zeros_param(hidden, width, trainable), zeros_param(1, width, trainable))

    def params(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


def ffn_forward(x, f):
    pre = linear(x, f.w1, f.b1)
    act = silu(pre)
    return linear(act, f.w2, f.b2), (x, pre, act)


def ffn(x, f):
    """``linear(silu(linear(x, W1, b1)), W2, b2)``; the residual is the caller's."""
    return ffn_forward(x, f)[0]


def ffn_backward(dout, f, cache):
    x, pre, act = cache
    dact = linear_backward(dout, act, f.w2, f.b2)
    return linear_backward(silu_backward(dact, pre), x, f.w1, f.b1)


# ---------------------------------------------------------------------------
# positional encoding
# ---------------------------------------------------------------------------

def position_encoding(n, width):
    """Fixed sinusoidal table: even column 2k is sin(t / 10000^(2k/D)), odd is cos."""
    if n < 1 or width < 1:
        raise InputError(f"position_encoding needs n, D >= 1 (got {n}, {width})")
    pos = np.arange(n, dtype=np.float64)[:, None]
    k = np.arange(width) // 2
    angle = pos / np.power(10000.0, 2.0 * k / width)[None, :]
    table = np.where(np.arange(width) % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(_dtype)


# ---------------------------------------------------------------------------
# finite-difference harness
# ---------------------------------------------------------------------------

def grad_check(f, params, delta=1e-5):
    """
    Compare analytic gradients against central differences.

    Args:
        f: zero-argument callable; runs forward + backward and returns the
            scalar loss, accumulating into ``Param.grad``.
        params: Params to check (frozen ones are skipped).
        delta: finite-difference step.

    Returns:
        max over trainable entries of |analytic - numeric| / max(1, |numeric|)
    """
    params = list(params)
    if any(p.value.dtype != np.float64 for p in params):
        raise InputError("grad_check requires test precision (float64 params)")
    if delta <= 0:
        raise InputError("grad_check step must be positive")

    for p in params:
        p.zero_grad()
    loss = _finite_loss(f)
    analytic = [p.grad.copy() for p in params]
    logger.debug("grad_check base loss %.6g over %d params", loss, len(params))

    worst = 0.0
    for p, g in zip(params, analytic):
        if not p.trainable:
            continue
        for idx in np.ndindex(p.value.shape):
            orig = p.value[idx]
            p.value[idx] = orig + delta
            plus = _finite_loss(f)
            p.value[idx] = orig - delta
            minus = _finite_loss(f)
            p.value[idx] = orig
            numeric = (plus - minus) / (2.0 * delta)
            worst = max(worst, abs(g[idx] - numeric) / max(1.0, abs(numeric)))

    for p in params:
        p.zero_grad()
    return worst


def _finite_loss(f):
    loss = float(f())
    if not np.isfinite(loss):
        raise NumericError(f"grad_check: loss is not finite ({loss})")
    return loss
