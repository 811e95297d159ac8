#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Multimodal assembly, action tuning, the frozen backbone stub and the
linear past/future heads, composed into the end-to-end ``ActionLLM`` model.

Row layout of the assembled sequence F_M (load-bearing for the heads):

    [0, θ₀)            text
    [θ₀, 2θ₀)          vision
    [2θ₀, 2θ₀ + N)     queries
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from src.adapters import (
    MODALITIES,
    AdapterWeights,
    EmbeddingTable,
    ProjectionPair,
    adapt_features_backward,
    adapt_features_forward,
    embed_labels,
    init_query_bank,
    project,
    project_backward,
)
from src.cmib import CmibParams, cmib_backward, cmib_forward
from src.errors import ConsistencyError, DimensionError, EmptyObservationError, InputError
from src.tensorkit import (
    AttentionWeights,
    FfnWeights,
    RmsNormParams,
    as_matrix,
    causal_mask,
    ffn_backward,
    ffn_forward,
    linear,
    linear_backward,
    mha_backward,
    mha_forward,
    normal_param,
    rms_norm_backward,
    rms_norm_forward,
    softplus,
    softplus_backward,
    zeros_param,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

@dataclass
class ModalityBundle:
    """Text/vision/query features at every stage of the pipeline."""

    F_T: np.ndarray
    F_V: np.ndarray
    F_Q: np.ndarray
    down: tuple = None
    up: tuple = None
    F_M: np.ndarray = None

    @property
    def theta0(self):
        return self.F_T.shape[0]

    @property
    def num_queries(self):
        return self.F_Q.shape[0]


def assemble_forward(bundle, n1):
    pairs = list(zip((bundle.F_T, bundle.F_V, bundle.F_Q), bundle.up or (None, None, None)))
    rows = []
    for base, up in pairs:
        if up is None:
            rows.append(base)
            continue
        if up.shape != base.shape:
            raise DimensionError(f"residual shape mismatch: {up.shape} vs {base.shape}")
        rows.append(up + base)
    return rms_norm_forward(np.concatenate(rows, axis=0), n1)


def assemble(bundle, n1):
    """``RMSNorm(Cat(F_T^up + F_T, F_V^up + F_V, F_Q^up + F_Q))`` in text, vision, query order."""
    F_M, _ = assemble_forward(bundle, n1)
    bundle.F_M = F_M
    return F_M


# ---------------------------------------------------------------------------
# action tuning
# ---------------------------------------------------------------------------

class TuningWeights:
    """
    Position-wise bottleneck ``W_C1 . Dropout(W_C0 . F_M + b_C0) + b_C1``.

    With ``kernel > 1`` both maps become same-padded 1-D convolutions over the
    sequence axis.
    """

    def __init__(self, embed_dim, tune_dim, rng, dropout=0.1, kernel=1, residual=False):
        self.kernel = kernel
        self.dropout = dropout
        self.residual = residual
        self.w0 = normal_param(rng, kernel * embed_dim, tune_dim)
        self.b0 = zeros_param(1, tune_dim)
        self.w1 = normal_param(rng, kernel * tune_dim, embed_dim)
        self.b1 = zeros_param(1, embed_dim)

    def params(self):
        return [("w0", self.w0), ("b0", self.b0), ("w1", self.w1), ("b1", self.b1)]


def _unfold_rows(x, kernel):
    if kernel == 1:
        return x
    n, c = x.shape
    r = kernel // 2
    padded = np.concatenate([np.zeros((r, c), x.dtype), x, np.zeros((r, c), x.dtype)])
    return np.concatenate([padded[j:j + n] for j in range(kernel)], axis=1)


def _fold_rows(dcols, kernel, c):
    if kernel == 1:
        return dcols
    n = dcols.shape[0]
    r = kernel // 2
    padded = np.zeros((n + 2 * r, c), dcols.dtype)
    for j in range(kernel):
        padded[j:j + n] += dcols[:, j * c:(j + 1) * c]
    return padded[r:r + n]


def action_tuning_forward(F_M, t, train_mode=False, rng=None):
    cols0 = _unfold_rows(F_M, t.kernel)
    hidden = linear(cols0, t.w0, t.b0)
    keep = None
    if train_mode and t.dropout > 0.0:
        if rng is None:
            raise InputError("train-mode action tuning needs an rng")
        if t.dropout >= 1.0:
            keep = np.zeros_like(hidden)
        else:
            keep = (rng.random(hidden.shape) >= t.dropout).astype(hidden.dtype) / (1.0 - t.dropout)
        dropped = hidden * keep
    else:
        dropped = hidden
    cols1 = _unfold_rows(dropped, t.kernel)
    out = linear(cols1, t.w1, t.b1)
    if t.residual:
        out = out + F_M
    return out, (cols0, keep, cols1, F_M.shape[1], dropped.shape[1])


def action_tuning(F_M, t, train_mode=False, rng=None):
    return action_tuning_forward(F_M, t, train_mode, rng)[0]


def action_tuning_backward(dout, t, cache):
    cols0, keep, cols1, width, tune_dim = cache
    ddropped = _fold_rows(linear_backward(dout, cols1, t.w1, t.b1), t.kernel, tune_dim)
    dhidden = ddropped if keep is None else ddropped * keep
    dF = _fold_rows(linear_backward(dhidden, cols0, t.w0, t.b0), t.kernel, width)
    if t.residual:
        dF = dF + dout
    return dF


# ---------------------------------------------------------------------------
# frozen backbone stub
# ---------------------------------------------------------------------------

class StubLayer:
    def __init__(self, width, heads, ffn_mult, rng, eps):
        out_std = 0.5 / np.sqrt(width)
        self.attn_norm = RmsNormParams(width, eps, trainable=False)
        self.attn = AttentionWeights.init(width, heads, rng, out_std=out_std, trainable=False)
        self.ffn_norm = RmsNormParams(width, eps, trainable=False)
        self.ffn = FfnWeights.init(width, width * ffn_mult, rng, out_std=out_std, trainable=False)

    def params(self):
        out = [(f"attn_norm.{n}", p) for n, p in self.attn_norm.params()]
        out += [(f"attn.{n}", p) for n, p in self.attn.params()]
        out += [(f"ffn_norm.{n}", p) for n, p in self.ffn_norm.params()]
        out += [(f"ffn.{n}", p) for n, p in self.ffn.params()]
        return out


class FrozenStub:
    """Seeded, untrainable pre-norm causal transformer standing in for the LLM."""

    def __init__(self, width, depth=2, heads=4, ffn_mult=2, seed=1234, eps=1e-6):
        rng = np.random.default_rng(seed)
        self.width = width
        self.seed = seed
        self.layers = [StubLayer(width, heads, ffn_mult, rng, eps) for _ in range(depth)]

    @property
    def depth(self):
        return len(self.layers)

    def params(self):
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"layer{i}.{n}", p) for n, p in layer.params()]
        return out


def stub_forward(F, s):
    if F.ndim != 2 or F.shape[1] != s.width:
        raise DimensionError(f"stub: expected width {s.width}, got shape {F.shape}")
    mask = causal_mask(F.shape[0])
    h = F
    caches = []
    for layer in s.layers:
        n1, c1 = rms_norm_forward(h, layer.attn_norm)
        a, ca = mha_forward(n1, n1, layer.attn, mask)
        h = h + a
        n2, c2 = rms_norm_forward(h, layer.ffn_norm)
        f, cf = ffn_forward(n2, layer.ffn)
        h = h + f
        caches.append((c1, ca, c2, cf))
    return h, caches


def stub(F, s):
    return stub_forward(F, s)[0]


def stub_backward(dH, s, caches):
    dh = dH
    for layer, (c1, ca, c2, cf) in zip(reversed(s.layers), reversed(caches)):
        dn2 = ffn_backward(dh, layer.ffn, cf)
        dh = dh + rms_norm_backward(dn2, layer.ffn_norm, c2)
        dX, dY = mha_backward(dh, layer.attn, ca)
        dh = dh + rms_norm_backward(dX + dY, layer.attn_norm, c1)
    return dh


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

class Heads:
    def __init__(self, embed_dim, num_classes, rng, shared_past=False):
        self.shared_past = shared_past
        self.past_text = normal_param(rng, embed_dim, num_classes)
        self.past_vis = self.past_text if shared_past else normal_param(rng, embed_dim, num_classes)
        self.future_class = normal_param(rng, embed_dim, num_classes + 1)
        self.future_dur = normal_param(rng, embed_dim, 1)

    def params(self):
        out = [("past_text", self.past_text)]
        if not self.shared_past:
            out.append(("past_vis", self.past_vis))
        return out + [("future_class", self.future_class), ("future_dur", self.future_dur)]


@dataclass
class ForwardPack:
    """Logits for both past heads, future class logits and durations."""

    text_logits: np.ndarray
    vision_logits: np.ndarray
    class_logits: np.ndarray
    durations: np.ndarray

    @property
    def theta0(self):
        return self.text_logits.shape[0]

    @property
    def num_queries(self):
        return self.class_logits.shape[0]


def apply_heads_forward(H, heads, theta0, num_queries):
    if H.shape[0] != 2 * theta0 + num_queries:
        raise DimensionError(f"heads: expected {2 * theta0 + num_queries} rows, got {H.shape[0]}")
    H_T = H[:theta0]
    H_V = H[theta0:2 * theta0]
    H_Q = H[2 * theta0:]
    dur_pre = linear(H_Q, heads.future_dur)[:, 0]
    pack = ForwardPack(
        text_logits=linear(H_T, heads.past_text),
        vision_logits=linear(H_V, heads.past_vis),
        class_logits=linear(H_Q, heads.future_class),
        durations=softplus(dur_pre),
    )
    return pack, (H_T, H_V, H_Q, dur_pre)


def apply_heads(H, heads, theta0, num_queries):
    """Returns ``(T̂, V̂, Â, D̂)``; durations pass through softplus."""
    pack, _ = apply_heads_forward(H, heads, theta0, num_queries)
    return pack.text_logits, pack.vision_logits, pack.class_logits, pack.durations


def apply_heads_backward(grads, heads, cache):
    """``grads`` is a ForwardPack of loss gradients."""
    H_T, H_V, H_Q, dur_pre = cache
    dT = linear_backward(grads.text_logits, H_T, heads.past_text)
    dV = linear_backward(grads.vision_logits, H_V, heads.past_vis)
    dQ = linear_backward(grads.class_logits, H_Q, heads.future_class)
    ddur = softplus_backward(grads.durations, dur_pre)[:, None]
    dQ = dQ + linear_backward(ddur, H_Q, heads.future_dur)
    return np.concatenate([dT, dV, dQ], axis=0)


# ---------------------------------------------------------------------------
# end-to-end model
# ---------------------------------------------------------------------------

class ActionLLM:
    """All parameters of one model plus its forward and backward passes."""

    def __init__(self, config, vocab):
        config.validate()
        if config.num_classes != vocab.num_classes:
            raise ConsistencyError(
                f"config has {config.num_classes} classes but the vocabulary has {vocab.num_classes}"
            )
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(config.init_seed)
        E, C = config.embed_dim, config.cmib_dim

        self.embedding = EmbeddingTable(vocab.token_buckets, E, seed=config.init_seed + 7919)
        self.adapter = AdapterWeights(config.feature_dim, config.hidden_adapter_dim, E, rng)
        self.query_bank = init_query_bank(
            config.num_queries, config.feature_dim, config.query_const, config.query_init, rng
        )
        self.use_cmib = config.cmib_mode != "none"
        if self.use_cmib:
            self.projections = ProjectionPair(E, C, rng, shared=config.shared_projections)
            self.cmib = CmibParams.init(
                C, config.cmib_heads, rng, config.cmib_depth, config.cmib_ffn_mult, config.rms_eps, config.cmib_mode
            )
        else:
            self.projections = None
            self.cmib = None
        self.assemble_norm = RmsNormParams(E, config.rms_eps, trainable=False)
        self.tuning = TuningWeights(
            E, config.tune_dim, rng, config.tune_dropout, config.tune_kernel, config.tuning_residual
        )
        self.stub = FrozenStub(
            E, config.stub_depth, config.stub_heads, config.stub_ffn_mult, config.stub_seed, config.rms_eps
        )
        self.heads = Heads(E, config.num_classes, rng, shared_past=config.shared_past_head)
        self._label_rows = None

    # -- parameters -------------------------------------------------------

    def named_params(self):
        """Unique Params in a fixed order, first name wins for shared ones."""
        groups = [
            ("embedding", self.embedding),
            ("adapter", self.adapter),
            ("query_bank", self.query_bank),
            ("projections", self.projections),
            ("cmib", self.cmib),
            ("assemble_norm", self.assemble_norm),
            ("tuning", self.tuning),
            ("stub", self.stub),
            ("heads", self.heads),
        ]
        seen = set()
        out = OrderedDict()
        for prefix, module in groups:
            if module is None:
                continue
            for name, p in module.params():
                if id(p) in seen:
                    continue
                seen.add(id(p))
                out[f"{prefix}.{name}"] = p
        return out

    def parameters(self):
        return list(self.named_params().values())

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- forward / backward -----------------------------------------------

    def text_features(self, labels):
        if self._label_rows is None:
            self._label_rows = embed_labels(self.vocab.names, self.vocab, self.embedding)
        rows = self._label_rows[np.asarray(labels, dtype=np.int64)]
        if not self.config.use_text:
            rows = np.zeros_like(rows)
        return rows

    def forward(self, features, labels, train_mode=False, rng=None):
        """
        Args:
            features: θ₀ x L_D sampled visual features
            labels: θ₀ class ids feeding the text stream
            train_mode: enables dropout in action tuning
            rng: generator for dropout

        Returns:
            (ForwardPack, cache); the cache feeds ``backward``
        """
        theta0 = len(labels)
        if theta0 < 1:
            raise EmptyObservationError("model forward needs at least one observed position")
        F_raw = as_matrix(features)
        if F_raw.shape[0] != theta0:
            raise DimensionError(f"{F_raw.shape[0]} feature rows but {theta0} labels")
        F_T = self.text_features(labels).astype(F_raw.dtype)
        F_V, cache_v = adapt_features_forward(F_raw, self.adapter)
        F_Q, cache_q = adapt_features_forward(self.query_bank.queries.value, self.adapter)
        bundle = ModalityBundle(F_T, F_V, F_Q)
        cache_c = None
        if self.use_cmib:
            bundle.down = tuple(
                project(F, self.projections, m, "down") for F, m in zip((F_T, F_V, F_Q), MODALITIES)
            )
            outs, cache_c = cmib_forward(*bundle.down, self.cmib)
            bundle.up = tuple(project(O, self.projections, m, "up") for O, m in zip(outs, MODALITIES))
            cache_c = (outs, cache_c)
        F_M, cache_n = assemble_forward(bundle, self.assemble_norm)
        bundle.F_M = F_M
        Z, cache_t = action_tuning_forward(F_M, self.tuning, train_mode, rng)
        H, cache_s = stub_forward(Z, self.stub)
        pack, cache_h = apply_heads_forward(H, self.heads, theta0, self.config.num_queries)
        cache = (bundle, cache_v, cache_q, cache_c, cache_n, cache_t, cache_s, cache_h)
        return pack, cache

    def backward(self, grads, cache):
        """Accumulate parameter gradients given a ForwardPack of output gradients."""
        bundle, cache_v, cache_q, cache_c, cache_n, cache_t, cache_s, cache_h = cache
        theta0 = bundle.theta0
        dH = apply_heads_backward(grads, self.heads, cache_h)
        dZ = stub_backward(dH, self.stub, cache_s)
        dF_M = action_tuning_backward(dZ, self.tuning, cache_t)
        dX = rms_norm_backward(dF_M, self.assemble_norm, cache_n)
        d_streams = [dX[:theta0], dX[theta0:2 * theta0], dX[2 * theta0:]]
        d_base = list(d_streams)
        if self.use_cmib:
            outs, cmib_cache = cache_c
            d_outs = tuple(
                project_backward(d, O, self.projections, m, "up")
                for d, O, m in zip(d_streams, outs, MODALITIES)
            )
            d_down = cmib_backward(d_outs, self.cmib, cmib_cache)
            for i, (d, F, m) in enumerate(zip(d_down, (bundle.F_T, bundle.F_V, bundle.F_Q), MODALITIES)):
                d_base[i] = d_base[i] + project_backward(d, F, self.projections, m, "down")
        # text features come from the frozen embedding: no further gradient
        adapt_features_backward(d_base[1], self.adapter, cache_v)
        d_queries = adapt_features_backward(d_base[2], self.adapter, cache_q)
        self.query_bank.queries.accumulate(d_queries)

    def predict(self, features, labels):
        """Eval-mode forward; a pure function of parameters and inputs."""
        return self.forward(features, labels, train_mode=False)[0]


def model_forward(observation, model, train_mode=False, rng=None):
    """Forward one sampled observation (anything with ``features`` and ``input_labels``)."""
    pack, _ = model.forward(observation.features, observation.input_labels, train_mode, rng)
    return pack


def count_params(model):
    """Returns ``(learnable, frozen)`` entry counts over unique Params."""
    learnable = frozen = 0
    for p in model.parameters():
        if p.trainable:
            learnable += p.size
        else:
            frozen += p.size
    return learnable, frozen


def count_params_by_group(model):
    groups = OrderedDict()
    for name, p in model.named_params().items():
        group = name.split(".", 1)[0]
        learnable, frozen = groups.get(group, (0, 0))
        if p.trainable:
            learnable += p.size
        else:
            frozen += p.size
        groups[group] = (learnable, frozen)
    return groups
