#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Supervision targets and the four-term objective.

    L = L_T + L_V + L_A + L_D

L_T / L_V are summed cross-entropies of the two past heads against clean GT,
L_A counts future query positions i <= φ (the None query included) and L_D
counts positions i < φ only. φ is 1-based. L_D is a positive squared error.
"""

import logging
from dataclasses import dataclass

import numpy as np

from src.config import LOG_CLAMP, LOSS_TERMS
from src.errors import DimensionError, InputError
from src.tensorkit import is_test_mode, log_softmax_rows, softmax_rows

logger = logging.getLogger(__name__)


@dataclass
class TargetPack:
    """
    Attributes:
        S: θ₀ x K one-hot past labels (target of both past heads)
        A: N x (K+1) one-hot future classes; rows past φ hold None as padding
        D: N duration fractions; zero past the last real segment
        phi: 1-based position of the None query, N+1 when every query is real
    """

    S: np.ndarray
    A: np.ndarray
    D: np.ndarray
    phi: int

    @property
    def num_queries(self):
        return self.A.shape[0]


@dataclass
class LossBreakdown:
    L_T: float = 0.0
    L_V: float = 0.0
    L_A: float = 0.0
    L_D: float = 0.0

    @property
    def L_total(self):
        return self.L_T + self.L_V + self.L_A + self.L_D

    def as_dict(self):
        return {"L_T": self.L_T, "L_V": self.L_V, "L_A": self.L_A, "L_D": self.L_D, "L_total": self.L_total}

    def __add__(self, other):
        return LossBreakdown(self.L_T + other.L_T, self.L_V + other.L_V,
                             self.L_A + other.L_A, self.L_D + other.L_D)

    def scaled(self, factor):
        return LossBreakdown(self.L_T * factor, self.L_V * factor, self.L_A * factor, self.L_D * factor)


def one_hot(ids, width, dtype=np.float64):
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros((len(ids), width), dtype=dtype)
    out[np.arange(len(ids)), ids] = 1.0
    return out


def build_targets(past_labels, segments, num_queries, horizon, num_classes):
    """
    Args:
        past_labels: θ₀ clean GT class ids at the sampled positions
        segments: (class id, frame length) runs covering the horizon exactly
        num_queries: N
        horizon: frame count of the prediction span
        num_classes: K (None is K)

    Returns:
        TargetPack
    """
    if horizon < 1:
        raise InputError(f"horizon must be >= 1, got {horizon}")
    covered = sum(length for _, length in segments)
    if covered != horizon:
        raise InputError(f"segments cover {covered} frames but the horizon is {horizon}")
    if any(length < 1 for _, length in segments):
        raise InputError("segment lengths must be positive")

    kept = list(segments[:num_queries])
    span = sum(length for _, length in kept)
    none_id = num_classes
    classes = [c for c, _ in kept]
    D = np.zeros(num_queries)
    D[:len(kept)] = [length / span for _, length in kept]
    phi = len(kept) + 1
    # the None query, then padding (ignored by both losses)
    classes += [none_id] * (num_queries - len(kept))
    return TargetPack(
        S=one_hot(past_labels, num_classes),
        A=one_hot(classes, num_classes + 1),
        D=D,
        phi=phi,
    )


def _log_probs(logits):
    logp = log_softmax_rows(np.asarray(logits, dtype=np.float64))
    if not is_test_mode():
        logp = np.maximum(logp, np.log(LOG_CLAMP))
    return logp


def _check(logits, target, what):
    if np.shape(logits) != np.shape(target):
        raise DimensionError(f"{what}: logits {np.shape(logits)} vs targets {np.shape(target)}")


def seg_loss(logits, S):
    """``-sum_i sum_j S_ij log softmax(Ŝ)_ij``, summed over positions."""
    _check(logits, S, "seg_loss")
    return float(-np.sum(S * _log_probs(logits)))


def seg_loss_backward(logits, S):
    _check(logits, S, "seg_loss")
    return softmax_rows(np.asarray(logits, dtype=np.float64)) * S.sum(axis=1, keepdims=True) - S


def _class_mask(num_queries, phi):
    return (np.arange(1, num_queries + 1) <= phi).astype(np.float64)


def _dur_mask(num_queries, phi):
    return (np.arange(1, num_queries + 1) < phi).astype(np.float64)


def class_loss(logits, A, phi):
    """Cross-entropy over query positions i <= φ; later positions are ignored."""
    _check(logits, A, "class_loss")
    mask = _class_mask(A.shape[0], phi)
    counted = np.flatnonzero(mask)
    if counted.size == 0:
        return 0.0
    logp = _log_probs(np.asarray(logits)[counted])
    return float(-np.sum(A[counted] * logp))


def class_loss_backward(logits, A, phi):
    _check(logits, A, "class_loss")
    mask = _class_mask(A.shape[0], phi)[:, None]
    probs = softmax_rows(np.asarray(logits, dtype=np.float64))
    return (probs - A) * mask


def dur_loss(durations, D, phi):
    """``sum_{i < φ} (D_i - D̂_i)^2``."""
    if np.shape(durations) != np.shape(D):
        raise DimensionError(f"dur_loss: predictions {np.shape(durations)} vs targets {np.shape(D)}")
    counted = np.flatnonzero(_dur_mask(len(D), phi))
    diff = D[counted] - np.asarray(durations, dtype=np.float64)[counted]
    return float(np.sum(diff * diff))


def dur_loss_backward(durations, D, phi):
    mask = _dur_mask(len(D), phi)
    return 2.0 * (np.asarray(durations, dtype=np.float64) - D) * mask


def _normalizers(pack, targets, loss_mean):
    if not loss_mean:
        return {"T": 1.0, "V": 1.0, "A": 1.0, "D": 1.0}
    theta0 = max(pack.theta0, 1)
    n_class = max(min(targets.phi, targets.num_queries), 1)
    n_dur = max(min(targets.phi - 1, targets.num_queries), 1)
    return {"T": 1.0 / theta0, "V": 1.0 / theta0, "A": 1.0 / n_class, "D": 1.0 / n_dur}


def total_loss(pack, targets, terms=LOSS_TERMS, loss_mean=False):
    """
    Unweighted sum of the enabled terms.

    Args:
        pack: ForwardPack from the model
        targets: TargetPack
        terms: subset of ('T', 'V', 'A', 'D'); disabled terms report 0
        loss_mean: normalise each term by its counted positions

    Returns:
        LossBreakdown
    """
    scale = _normalizers(pack, targets, loss_mean)
    out = LossBreakdown()
    if "T" in terms:
        out.L_T = scale["T"] * seg_loss(pack.text_logits, targets.S)
    if "V" in terms:
        out.L_V = scale["V"] * seg_loss(pack.vision_logits, targets.S)
    if "A" in terms:
        out.L_A = scale["A"] * class_loss(pack.class_logits, targets.A, targets.phi)
    if "D" in terms:
        out.L_D = scale["D"] * dur_loss(pack.durations, targets.D, targets.phi)
    return out


def total_loss_backward(pack, targets, terms=LOSS_TERMS, loss_mean=False):
    """Gradient of ``total_loss`` w.r.t. the pack, returned as a ForwardPack of the same shapes."""
    scale = _normalizers(pack, targets, loss_mean)
    dtype = pack.class_logits.dtype

    def grad(term, fn, *args):
        if term in terms:
            return (scale[term] * fn(*args)).astype(dtype)
        return np.zeros_like(args[0], dtype=dtype)

    return type(pack)(
        text_logits=grad("T", seg_loss_backward, pack.text_logits, targets.S),
        vision_logits=grad("V", seg_loss_backward, pack.vision_logits, targets.S),
        class_logits=grad("A", class_loss_backward, pack.class_logits, targets.A, targets.phi),
        durations=grad("D", dur_loss_backward, pack.durations, targets.D, targets.phi),
    )
