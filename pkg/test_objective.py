#!/usr/bin/env python
# -*- coding: utf-8 -*-

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.backbone import ForwardPack
from src.errors import DimensionError, InputError
from src.objective import (
    LossBreakdown,
    build_targets,
    class_loss,
    class_loss_backward,
    dur_loss,
    dur_loss_backward,
    one_hot,
    seg_loss,
    seg_loss_backward,
    total_loss,
    total_loss_backward,
)
from src.tensorkit import precision

CUT, PLACE, K = 0, 1, 4
NONE = K


def test_build_targets_examples():
    t = build_targets([CUT, CUT], [(CUT, 6), (PLACE, 4)], 4, 10, K)
    assert t.A.argmax(axis=1).tolist() == [CUT, PLACE, NONE, NONE]
    assert_allclose(t.D[:2], [0.6, 0.4])
    assert t.phi == 3
    assert_array_equal(t.S, one_hot([CUT, CUT], K))

    t = build_targets([2], [(2, 10)], 2, 10, K)
    assert t.A.argmax(axis=1).tolist() == [2, NONE]
    assert_allclose(t.D[0], 1.0)
    assert t.phi == 2


def test_build_targets_truncates_and_renormalises():
    segments = [(0, 2), (1, 3), (2, 5), (3, 1), (0, 4)]
    t = build_targets([0], segments, 3, 15, K)
    assert t.A.argmax(axis=1).tolist() == [0, 1, 2]
    assert t.phi == 4
    assert_allclose(t.D, [0.2, 0.3, 0.5])
    assert abs(t.D.sum() - 1.0) < 1e-9


def test_build_targets_rejects_bad_segments():
    with pytest.raises(InputError):
        build_targets([0], [(0, 4)], 3, 5, K)
    with pytest.raises(InputError):
        build_targets([0], [], 3, 0, K)


def test_seg_loss_examples():
    S = one_hot([0, 2], 3)
    assert seg_loss(np.where(S > 0, 200.0, -200.0), S) == pytest.approx(0.0, abs=1e-12)
    assert seg_loss(np.zeros((2, 3)), S) == pytest.approx(2 * math.log(3), abs=1e-5)
    with pytest.raises(DimensionError):
        seg_loss(np.zeros((2, 4)), S)


def test_class_loss_examples():
    A = one_hot([0, 1, NONE], K + 1)
    assert class_loss(np.zeros((3, K + 1)), A, 2) == pytest.approx(2 * math.log(5))
    assert class_loss(np.zeros((3, K + 1)), A, 4) == pytest.approx(3 * math.log(5))


def test_class_loss_ignores_positions_after_phi(rng):
    A = one_hot([0, 1, NONE, NONE], K + 1)
    logits = rng.normal(size=(4, K + 1))
    base = class_loss(logits, A, 3)
    perturbed = logits.copy()
    perturbed[3] = rng.normal(size=K + 1) * 50
    assert class_loss(perturbed, A, 3) == base
    assert_array_equal(class_loss_backward(logits, A, 3)[3], np.zeros(K + 1))


def test_dur_loss_examples():
    D = np.array([0.6, 0.4, 0.0])
    assert dur_loss(np.array([0.5, 0.5, 0.0]), D, 3) == pytest.approx(0.02)
    assert dur_loss(D.copy(), D, 3) == 0.0
    assert dur_loss(np.array([0.6, 0.4, 9.0]), D, 3) == 0.0
    assert_array_equal(dur_loss_backward(np.array([0.6, 0.4, 9.0]), D, 3), np.zeros(3))
    with pytest.raises(DimensionError):
        dur_loss(np.zeros(2), D, 3)


def test_losses_match_loop_oracles(float64, rng):
    for _ in range(1000):
        theta0 = int(rng.integers(1, 5))
        N = int(rng.integers(1, 5))
        k = int(rng.integers(2, 5))
        phi = int(rng.integers(1, N + 2))
        S = one_hot(rng.integers(0, k, size=theta0), k)
        logits = rng.normal(scale=3.0, size=(theta0, k))
        A = one_hot(rng.integers(0, k + 1, size=N), k + 1)
        a_logits = rng.normal(scale=3.0, size=(N, k + 1))
        D = rng.random(N)
        D_hat = rng.random(N)

        seg = 0.0
        for i in range(theta0):
            z = sum(math.exp(v) for v in logits[i])
            for j in range(k):
                seg -= S[i, j] * math.log(math.exp(logits[i, j]) / z)
        cls = 0.0
        for i in range(N):
            if i + 1 <= phi:
                z = sum(math.exp(v) for v in a_logits[i])
                for j in range(k + 1):
                    cls -= A[i, j] * math.log(math.exp(a_logits[i, j]) / z)
        dur = sum((D[i] - D_hat[i]) ** 2 for i in range(N) if i + 1 < phi)

        assert abs(seg_loss(logits, S) - seg) < 1e-9
        assert abs(class_loss(a_logits, A, phi) - cls) < 1e-9
        assert abs(dur_loss(D_hat, D, phi) - dur) < 1e-9


def test_loss_gradients_match_differences(float64, rng):
    S = one_hot([1, 0, 2], 3)
    logits = rng.normal(size=(3, 3))
    A = one_hot([0, 2, 3], 4)
    a_logits = rng.normal(size=(3, 4))
    eps = 1e-6
    for fn, grad_fn, x, args in (
        (seg_loss, seg_loss_backward, logits, (S,)),
        (class_loss, class_loss_backward, a_logits, (A, 2)),
    ):
        g = grad_fn(x, *args)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + eps
            plus = fn(x, *args)
            x[idx] = orig - eps
            minus = fn(x, *args)
            x[idx] = orig
            assert abs(g[idx] - (plus - minus) / (2 * eps)) < 1e-6


def test_log_clamp_in_run_mode():
    S = one_hot([1], 2)
    logits = np.array([[0.0, -1e6]])
    assert seg_loss(logits, S) == pytest.approx(-math.log(1e-12))
    with precision("test"):
        assert seg_loss(logits, S) == pytest.approx(1e6)


def _pack(rng, theta0=2, N=3, k=K):
    return ForwardPack(
        text_logits=rng.normal(size=(theta0, k)),
        vision_logits=rng.normal(size=(theta0, k)),
        class_logits=rng.normal(size=(N, k + 1)),
        durations=rng.random(N),
    )


def test_total_loss_breakdown(float64, rng):
    pack = _pack(rng)
    targets = build_targets([0, 1], [(2, 3), (1, 7)], 3, 10, K)
    losses = total_loss(pack, targets)
    assert losses.L_total == losses.L_T + losses.L_V + losses.L_A + losses.L_D
    assert losses.L_T == seg_loss(pack.text_logits, targets.S)
    assert losses.L_D == dur_loss(pack.durations, targets.D, targets.phi)
    assert losses.as_dict()["L_total"] == losses.L_total

    only_a = total_loss(pack, targets, terms={"A"})
    assert only_a.L_total == only_a.L_A == losses.L_A

    grads = total_loss_backward(pack, targets, terms={"A"})
    assert_array_equal(grads.text_logits, np.zeros_like(pack.text_logits))
    assert_array_equal(grads.durations, np.zeros_like(pack.durations))


def test_total_loss_mean(float64, rng):
    pack = _pack(rng)
    targets = build_targets([0, 1], [(2, 3), (1, 7)], 3, 10, K)
    summed = total_loss(pack, targets)
    mean = total_loss(pack, targets, loss_mean=True)
    assert mean.L_T == pytest.approx(summed.L_T / 2)
    assert mean.L_A == pytest.approx(summed.L_A / 3)
    assert mean.L_D == pytest.approx(summed.L_D / 2)


def test_loss_breakdown_arithmetic():
    total = LossBreakdown(1.0, 2.0, 3.0, 4.0) + LossBreakdown(1.0, 1.0, 1.0, 1.0)
    assert total.L_total == 14.0
    assert total.scaled(0.5).L_total == 7.0
