#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Cross-Modality Interaction Block.

CMIA: each output stream m in (text, vision, query) sums one self-attention
over itself and two cross-attentions over the other streams. CMIB wraps it:

    O  = CMIA(RMSNorm(F + P)) + F
    O' = FFN(RMSNorm(O)) + O

with P the sinusoidal table over each stream's own positions.
"""

import logging

from src.errors import DimensionError, InputError
from src.tensorkit import (
    AttentionWeights,
    FfnWeights,
    RmsNormParams,
    ffn_backward,
    ffn_forward,
    mha_backward,
    mha_forward,
    position_encoding,
    rms_norm_backward,
    rms_norm_forward,
)

logger = logging.getLogger(__name__)

STREAMS = ("T", "V", "Q")

# which attention terms each mode keeps
_MODE_TERMS = {
    "full": lambda m, s: True,
    "self": lambda m, s: m == s,
    "cross": lambda m, s: m != s,
}


class CmiaWeights:
    """Nine independent attention blocks keyed by (output stream, source stream)."""

    def __init__(self, blocks, mode="full"):
        if mode not in _MODE_TERMS:
            raise InputError(f"unknown CMIA mode {mode!r}")
        widths = {w.width for w in blocks.values()}
        heads = {w.heads for w in blocks.values()}
        if len(widths) != 1 or len(heads) != 1:
            raise DimensionError("CMIA blocks must share one width and head count")
        self.blocks = blocks
        self.mode = mode
        self.width = widths.pop()

    @classmethod
    def init(cls, width, heads, rng, mode="full"):
        blocks = {(m, s): AttentionWeights.init(width, heads, rng) for m in STREAMS for s in STREAMS}
        return cls(blocks, mode)

    @classmethod
    def zeros(cls, width, heads, mode="full"):
        return cls({(m, s): AttentionWeights.zeros(width, heads) for m in STREAMS for s in STREAMS}, mode)

    def terms(self):
        keep = _MODE_TERMS[self.mode]
        return [(m, s) for m in STREAMS for s in STREAMS if keep(m, s)]

    def params(self):
        out = []
        for (m, s) in self.terms():
            out += [(f"{m}<{s}.{name}", p) for name, p in self.blocks[(m, s)].params()]
        return out


def _check_streams(inputs, width):
    for name, x in zip(STREAMS, inputs):
        if x.ndim != 2 or x.shape[1] != width:
            raise DimensionError(f"CMIA stream {name}: expected width {width}, got shape {x.shape}")


def cmia_forward(I_T, I_V, I_Q, w):
    """Returns ``((O_T, O_V, O_Q), cache)``."""
    inputs = {"T": I_T, "V": I_V, "Q": I_Q}
    _check_streams((I_T, I_V, I_Q), w.width)
    outputs = {m: 0.0 * inputs[m] for m in STREAMS}
    caches = {}
    for (m, s) in w.terms():
        out, caches[(m, s)] = mha_forward(inputs[m], inputs[s], w.blocks[(m, s)])
        outputs[m] = outputs[m] + out
    return (outputs["T"], outputs["V"], outputs["Q"]), caches


def cmia(I_T, I_V, I_Q, w):
    return cmia_forward(I_T, I_V, I_Q, w)[0]


def cmia_backward(douts, w, caches):
    """``douts`` is ``(dO_T, dO_V, dO_Q)``; returns the three input gradients."""
    dout = dict(zip(STREAMS, douts))
    dinp = {m: 0.0 * dout[m] for m in STREAMS}
    for (m, s) in w.terms():
        dX, dY = mha_backward(dout[m], w.blocks[(m, s)], caches[(m, s)])
        dinp[m] = dinp[m] + dX
        dinp[s] = dinp[s] + dY
    return dinp["T"], dinp["V"], dinp["Q"]


class CmibLayer:
    """One CMIB block: CMIA plus per-stream norms and FFNs."""

    def __init__(self, cmia_weights, pre_norm, post_norm, ffns):
        self.cmia = cmia_weights
        self.pre_norm = pre_norm
        self.post_norm = post_norm
        self.ffns = ffns

    @classmethod
    def init(cls, width, heads, ffn_mult, rng, eps=1e-6, mode="full"):
        return cls(
            CmiaWeights.init(width, heads, rng, mode),
            {m: RmsNormParams(width, eps) for m in STREAMS},
            {m: RmsNormParams(width, eps) for m in STREAMS},
            {m: FfnWeights.init(width, width * ffn_mult, rng) for m in STREAMS},
        )

    @classmethod
    def zeros(cls, width, heads, ffn_mult, eps=1e-6, mode="full"):
        return cls(
            CmiaWeights.zeros(width, heads, mode),
            {m: RmsNormParams(width, eps) for m in STREAMS},
            {m: RmsNormParams(width, eps) for m in STREAMS},
            {m: FfnWeights.zeros(width, width * ffn_mult) for m in STREAMS},
        )

    def params(self):
        out = [(f"cmia.{n}", p) for n, p in self.cmia.params()]
        for m in STREAMS:
            out += [(f"pre_norm.{m}.{n}", p) for n, p in self.pre_norm[m].params()]
            out += [(f"post_norm.{m}.{n}", p) for n, p in self.post_norm[m].params()]
            out += [(f"ffn.{m}.{n}", p) for n, p in self.ffns[m].params()]
        return out


class CmibParams:
    """A stack of ``depth`` CMIB layers at width ``d_c``."""

    def __init__(self, layers):
        if not layers:
            raise InputError("CMIB depth must be >= 1")
        self.layers = layers
        self.width = layers[0].cmia.width

    @classmethod
    def init(cls, width, heads, rng, depth=1, ffn_mult=2, eps=1e-6, mode="full"):
        return cls([CmibLayer.init(width, heads, ffn_mult, rng, eps, mode) for _ in range(depth)])

    @classmethod
    def zeros(cls, width, heads, depth=1, ffn_mult=2, eps=1e-6):
        return cls([CmibLayer.zeros(width, heads, ffn_mult, eps) for _ in range(depth)])

    @property
    def depth(self):
        return len(self.layers)

    def params(self):
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"layer{i}.{n}", p) for n, p in layer.params()]
        return out


def _layer_forward(streams, layer):
    normed, norm_caches = [], []
    for m, x in zip(STREAMS, streams):
        pe = position_encoding(x.shape[0], x.shape[1]).astype(x.dtype)
        n, c = rms_norm_forward(x + pe, layer.pre_norm[m])
        normed.append(n)
        norm_caches.append(c)
    attended, cmia_cache = cmia_forward(*normed, layer.cmia)
    mids = [a + x for a, x in zip(attended, streams)]
    outs, post_caches, ffn_caches = [], [], []
    for m, o in zip(STREAMS, mids):
        n, pc = rms_norm_forward(o, layer.post_norm[m])
        f, fc = ffn_forward(n, layer.ffns[m])
        outs.append(f + o)
        post_caches.append(pc)
        ffn_caches.append(fc)
    return tuple(outs), (norm_caches, cmia_cache, post_caches, ffn_caches)


def _layer_backward(douts, layer, cache):
    norm_caches, cmia_cache, post_caches, ffn_caches = cache
    dmids = []
    for m, d, pc, fc in zip(STREAMS, douts, post_caches, ffn_caches):
        dn = ffn_backward(d, layer.ffns[m], fc)
        dmids.append(d + rms_norm_backward(dn, layer.post_norm[m], pc))
    dnormed = cmia_backward(dmids, layer.cmia, cmia_cache)
    dins = []
    for m, dm, dn, nc in zip(STREAMS, dmids, dnormed, norm_caches):
        # P is constant, so d(F + P) = dF
        dins.append(dm + rms_norm_backward(dn, layer.pre_norm[m], nc))
    return tuple(dins)


def cmib_forward(F_T, F_V, F_Q, p):
    """Returns ``((O'_T, O'_V, O'_Q), cache)``; stream lengths are preserved."""
    _check_streams((F_T, F_V, F_Q), p.width)
    streams = (F_T, F_V, F_Q)
    caches = []
    for layer in p.layers:
        streams, cache = _layer_forward(streams, layer)
        caches.append(cache)
    return streams, caches


def cmib(F_T, F_V, F_Q, p):
    return cmib_forward(F_T, F_V, F_Q, p)[0]


def cmib_backward(douts, p, caches):
    for layer, cache in zip(reversed(p.layers), reversed(caches)):
        douts = _layer_backward(douts, layer, cache)
    return douts
