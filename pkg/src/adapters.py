#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Input adaptation: stub tokenizer, frozen token embedding with label-mean
pooling, the SiLU feature adapter shared by vision and queries, per-modality
down/up projections and the trainable query bank.
"""

import hashlib
import logging
import re
from dataclasses import dataclass, field

import numpy as np

from src.config import DEFAULT_TOKEN_BUCKETS
from src.errors import DimensionError, InputError
from src.tensorkit import (
    Param,
    as_matrix,
    linear,
    linear_backward,
    normal_param,
    silu,
    silu_backward,
    zeros_param,
)

logger = logging.getLogger(__name__)

MODALITIES = ("text", "vision", "query")

_SPLIT = re.compile(r"[\s_]+")


@dataclass
class Vocabulary:
    """Action classes ``0..K-1`` plus the extra None class ``K``."""

    names: list
    token_buckets: int = DEFAULT_TOKEN_BUCKETS
    _ids: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.names = list(self.names)
        for i, name in enumerate(self.names):
            if name in self._ids:
                raise InputError(f"duplicate action name {name!r}")
            self._ids[name] = i
        if self.token_buckets < 1:
            raise InputError("token_buckets must be >= 1")

    @property
    def num_classes(self):
        return len(self.names)

    @property
    def none_id(self):
        return len(self.names)

    def id_of(self, name):
        try:
            return self._ids[name]
        except KeyError:
            raise InputError(f"unknown action name {name!r}") from None

    def name_of(self, idx):
        if idx == self.none_id:
            return "None"
        return self.names[idx]

    def __contains__(self, name):
        return name in self._ids

    def __len__(self):
        return len(self.names)


def tokenize(label, vocab):
    """
    Lowercase, split on whitespace/underscore and hash each piece into
    ``[0, token_buckets)``.
    """
    pieces = [p for p in _SPLIT.split(str(label).strip().lower()) if p]
    if not pieces:
        raise InputError(f"cannot tokenize empty label {label!r}")
    ids = []
    for piece in pieces:
        digest = hashlib.blake2b(piece.encode("utf-8"), digest_size=8).digest()
        ids.append(int.from_bytes(digest, "little") % vocab.token_buckets)
    return ids


class EmbeddingTable:
    """Frozen token embedding, deterministic from its seed."""

    def __init__(self, buckets, width, seed):
        rng = np.random.default_rng(seed)
        self.table = Param(rng.normal(0.0, 1.0, size=(buckets, width)), trainable=False)
        self.seed = seed

    @property
    def width(self):
        return self.table.value.shape[1]

    def params(self):
        return [("table", self.table)]


def embed_label(label, vocab, emb):
    """Mean of the token rows of ``label``."""
    ids = tokenize(label, vocab)
    return emb.table.value[ids].mean(axis=0)


def embed_labels(labels, vocab, emb):
    """One row per label: the text features ``F_T``."""
    if len(labels) == 0:
        return np.zeros((0, emb.width), dtype=emb.table.value.dtype)
    return np.stack([embed_label(label, vocab, emb) for label in labels])


class AdapterWeights:
    """``W_F1 . SiLU(W_F0 . F + b_F0) + b_F1``, shared by vision and queries."""

    def __init__(self, feature_dim, hidden_dim, embed_dim, rng):
        self.w0 = normal_param(rng, feature_dim, hidden_dim)
        self.b0 = zeros_param(1, hidden_dim)
        self.w1 = normal_param(rng, hidden_dim, embed_dim)
        self.b1 = zeros_param(1, embed_dim)

    def params(self):
        return [("w0", self.w0), ("b0", self.b0), ("w1", self.w1), ("b1", self.b1)]


def adapt_features_forward(F, w):
    pre = linear(F, w.w0, w.b0)
    act = silu(pre)
    return linear(act, w.w1, w.b1), (F, pre, act)


def adapt_features(F, w):
    return adapt_features_forward(as_matrix(F), w)[0]


def adapt_features_backward(dout, w, cache):
    F, pre, act = cache
    dact = linear_backward(dout, act, w.w1, w.b1)
    return linear_backward(silu_backward(dact, pre), F, w.w0, w.b0)


class ProjectionPair:
    """
    Bias-free multimodal down (L_E -> d_c) and up (d_c -> L_E) projections,
    one pair per modality unless ``shared``.
    """

    def __init__(self, embed_dim, cmib_dim, rng, shared=False):
        self.shared = shared
        self.down = {}
        self.up = {}
        for m in MODALITIES:
            if shared and self.down:
                self.down[m] = self.down["text"]
                self.up[m] = self.up["text"]
                continue
            self.down[m] = normal_param(rng, embed_dim, cmib_dim)
            self.up[m] = normal_param(rng, cmib_dim, embed_dim)

    def weight(self, modality, direction):
        if modality not in MODALITIES:
            raise InputError(f"unknown modality {modality!r}")
        if direction == "down":
            return self.down[modality]
        if direction == "up":
            return self.up[modality]
        raise InputError(f"unknown projection direction {direction!r}")

    def params(self):
        if self.shared:
            return [("down", self.down["text"]), ("up", self.up["text"])]
        out = []
        for m in MODALITIES:
            out += [(f"down.{m}", self.down[m]), (f"up.{m}", self.up[m])]
        return out


def project(F, pair, modality, direction):
    W = pair.weight(modality, direction)
    if F.shape[1] != W.value.shape[0]:
        raise DimensionError(
            f"{direction} projection for {modality}: expected width {W.value.shape[0]}, got {F.shape[1]}"
        )
    return linear(F, W)


def project_backward(dout, F, pair, modality, direction):
    return linear_backward(dout, F, pair.weight(modality, direction))


class QueryBank:
    """Learned action queries ``F_Q`` (N x L_D)."""

    def __init__(self, value):
        self.queries = Param(value, trainable=True)

    @property
    def num_queries(self):
        return self.queries.value.shape[0]

    def params(self):
        return [("queries", self.queries)]


def init_query_bank(num_queries, feature_dim, c=0.5, mode="constant", rng=None):
    """
    Args:
        num_queries: N
        feature_dim: L_D
        c: the constant for ``mode='constant'``
        mode: 'constant', 'zero' or 'normal'
        rng: generator, required for 'normal'
    """
    if num_queries < 1 or feature_dim < 1:
        raise InputError("query bank needs N, L_D >= 1")
    if mode == "constant":
        value = np.full((num_queries, feature_dim), c)
    elif mode == "zero":
        value = np.zeros((num_queries, feature_dim))
    elif mode == "normal":
        if rng is None:
            raise InputError("normal query init needs an rng")
        value = rng.normal(0.0, 1.0, size=(num_queries, feature_dim))
    else:
        raise InputError(f"unknown query init {mode!r}")
    return QueryBank(value)
