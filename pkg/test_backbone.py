#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
测试主干网络
"""

import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.adapters import Vocabulary
from src.backbone import (
    ActionLLM,
    FrozenStub,
    Heads,
    ModalityBundle,
    TuningWeights,
    action_tuning,
    action_tuning_backward,
    action_tuning_forward,
    apply_heads,
    assemble,
    count_params,
    count_params_by_group,
    model_forward,
    stub,
)
from src.errors import ConsistencyError, DimensionError, EmptyObservationError, InputError
from src.objective import build_targets, total_loss, total_loss_backward
from src.tensorkit import RmsNormParams, grad_check, rms_norm
from src.trainer import Adam


def _inputs(rng, theta0=3, feature_dim=6, num_classes=4):
    features = rng.normal(size=(theta0, feature_dim))
    labels = rng.integers(0, num_classes, size=theta0)
    return features, labels


def test_assemble_with_zero_up_projections(float64, rng):
    F_T, F_V, F_Q = rng.normal(size=(2, 5)), rng.normal(size=(2, 5)), rng.normal(size=(3, 5))
    n1 = RmsNormParams(5, trainable=False)
    zeros = tuple(np.zeros_like(F) for F in (F_T, F_V, F_Q))
    F_M = assemble(ModalityBundle(F_T, F_V, F_Q, up=zeros), n1)
    assert F_M.shape == (7, 5)
    assert_allclose(F_M, rms_norm(np.concatenate([F_T, F_V, F_Q]), n1))


def test_assemble_row_order(float64, rng):
    F_T, F_V, F_Q = rng.normal(size=(2, 5)), rng.normal(size=(2, 5)), rng.normal(size=(3, 5))
    n1 = RmsNormParams(5, trainable=False)
    base = assemble(ModalityBundle(F_T, F_V, F_Q), n1)
    F_T2 = F_T.copy()
    F_T2[1] += 1.0
    moved = assemble(ModalityBundle(F_T2, F_V, F_Q), n1)
    changed = np.flatnonzero(np.any(base != moved, axis=1))
    assert changed.tolist() == [1]


def test_action_tuning_examples(float64, rng):
    t = TuningWeights(8, 2, rng, dropout=0.0)
    F_M = rng.normal(size=(5, 8))
    assert_array_equal(action_tuning(F_M, t), action_tuning(F_M, t, train_mode=True, rng=rng))

    zero = TuningWeights(8, 2, rng)
    for p in (zero.w0, zero.b0, zero.w1, zero.b1):
        p.value[...] = 0.0
    assert_array_equal(action_tuning(F_M, zero), np.zeros((5, 8)))

    full = TuningWeights(8, 2, rng, dropout=1.0)
    full.b1.value[...] = rng.normal(size=(1, 8))
    out = action_tuning(F_M, full, train_mode=True, rng=rng)
    assert_array_equal(out, np.broadcast_to(full.b1.value, (5, 8)))

    with pytest.raises(InputError):
        action_tuning(F_M, TuningWeights(8, 2, rng, dropout=0.5), train_mode=True)


def test_action_tuning_dropout_is_seeded(rng):
    t = TuningWeights(8, 2, rng, dropout=0.5)
    F_M = rng.normal(size=(5, 8)).astype(np.float32)
    a = action_tuning(F_M, t, True, np.random.default_rng(4))
    b = action_tuning(F_M, t, True, np.random.default_rng(4))
    assert_array_equal(a, b)


@pytest.mark.parametrize("kernel,residual", [(1, False), (3, False), (3, True)])
def test_action_tuning_gradients(float64, rng, kernel, residual):
    t = TuningWeights(6, 3, rng, dropout=0.3, kernel=kernel, residual=residual)
    F_M = rng.normal(size=(5, 6))
    R = rng.normal(size=(5, 6))
    mask_rng_seed = 11

    def f():
        out, cache = action_tuning_forward(F_M, t, True, np.random.default_rng(mask_rng_seed))
        action_tuning_backward(R, t, cache)
        return float(np.sum(R * out))

    assert grad_check(f, [p for _, p in t.params()]) < 1e-6

    out, cache = action_tuning_forward(F_M, t, True, np.random.default_rng(mask_rng_seed))
    dF = action_tuning_backward(R, t, cache)
    eps = 1e-6
    orig = F_M[2, 1]
    F_M[2, 1] = orig + eps
    plus = np.sum(R * action_tuning(F_M, t, True, np.random.default_rng(mask_rng_seed)))
    F_M[2, 1] = orig - eps
    minus = np.sum(R * action_tuning(F_M, t, True, np.random.default_rng(mask_rng_seed)))
    F_M[2, 1] = orig
    assert_allclose(dF[2, 1], (plus - minus) / (2 * eps), atol=1e-6)


def test_stub_identity_and_determinism(rng):
    F = rng.normal(size=(6, 8)).astype(np.float32)
    assert_array_equal(stub(F, FrozenStub(8, depth=0)), F)
    assert_array_equal(stub(F, FrozenStub(8, seed=5)), stub(F, FrozenStub(8, seed=5)))
    assert all(not p.trainable for _, p in FrozenStub(8).params())
    with pytest.raises(DimensionError):
        stub(F[:, :4], FrozenStub(8))


def test_stub_is_causal(float64, rng):
    s = FrozenStub(8, depth=2, heads=2)
    F = rng.normal(size=(6, 8))
    base = stub(F, s)
    F2 = F.copy()
    F2[3] += 0.5
    moved = stub(F2, s)
    assert_array_equal(base[:3], moved[:3])
    assert np.all(np.any(base[3:] != moved[3:], axis=1))


def test_heads_shapes_and_locality(float64, rng):
    heads = Heads(8, 4, rng)
    H = rng.normal(size=(2 * 2 + 3, 8))
    T, V, A, D = apply_heads(H, heads, 2, 3)
    assert (T.shape, V.shape, A.shape, D.shape) == ((2, 4), (2, 4), (3, 5), (3,))
    assert np.all(D >= 0)

    H2 = H.copy()
    H2[0] += 1.0
    T2, V2, A2, D2 = apply_heads(H2, heads, 2, 3)
    assert np.any(T2[0] != T[0])
    assert_array_equal(T2[1], T[1])
    assert_array_equal(V2, V)
    assert_array_equal(A2, A)

    for p in (heads.past_text, heads.past_vis, heads.future_class, heads.future_dur):
        p.value[...] = 0.0
    T, V, A, D = apply_heads(np.zeros((7, 8)), heads, 2, 3)
    assert_array_equal(A, np.zeros((3, 5)))
    assert_allclose(D, np.log(2.0))

    with pytest.raises(DimensionError):
        apply_heads(np.zeros((6, 8)), heads, 2, 3)


def test_model_shape_audit_and_determinism(rng, tiny_config, tiny_vocab):
    model = ActionLLM(tiny_config, tiny_vocab)
    features, labels = _inputs(rng)
    pack = model.predict(features, labels)
    assert pack.text_logits.shape == (3, 4)
    assert pack.vision_logits.shape == (3, 4)
    assert pack.class_logits.shape == (2, 5)
    assert pack.durations.shape == (2,)
    again = model.predict(features, labels)
    assert_array_equal(pack.class_logits, again.class_logits)
    assert_array_equal(pack.durations, again.durations)

    with pytest.raises(EmptyObservationError):
        model.predict(np.zeros((0, 6)), [])
    with pytest.raises(DimensionError):
        model.predict(features[:2], labels)


def test_model_forward_takes_observations(rng, tiny_config, tiny_vocab):
    model = ActionLLM(tiny_config, tiny_vocab)
    features, labels = _inputs(rng)

    @dataclasses.dataclass
    class Obs:
        features: np.ndarray
        input_labels: np.ndarray

    pack = model_forward(Obs(features, labels), model)
    assert_array_equal(pack.class_logits, model.predict(features, labels).class_logits)


def test_model_rejects_class_count_mismatch(tiny_config):
    with pytest.raises(ConsistencyError):
        ActionLLM(tiny_config, Vocabulary(["a", "b"], token_buckets=16))


def test_count_params_enumeration():
    config = dataclasses.replace(
        _enum_config(), stub_depth=0,
    )
    vocab = Vocabulary(["a", "b", "c"], token_buckets=16)
    learnable, frozen = count_params(ActionLLM(config, vocab))
    L_E, d_c, L_MA, K, N, L_D, L_MF, V = 8, 4, 2, 3, 2, 6, 4, 16
    adapter = L_D * L_MF + L_MF + L_MF * L_E + L_E
    queries = N * L_D
    projections = 3 * (L_E * d_c + d_c * L_E)
    cmia = 9 * 4 * d_c * d_c
    norms = 6 * d_c
    ffns = 3 * (d_c * 2 * d_c + 2 * d_c + 2 * d_c * d_c + d_c)
    tuning = L_E * L_MA + L_MA + L_MA * L_E + L_E
    heads = 2 * L_E * K + L_E * (K + 1) + L_E
    assert learnable == adapter + queries + projections + cmia + norms + ffns + tuning + heads
    assert frozen == V * L_E + L_E


def _enum_config():
    from src.config import ModelConfig
    return ModelConfig(
        num_classes=3, feature_dim=6, embed_dim=8, adapter_dim=4, cmib_dim=4, cmib_heads=2,
        tune_dim=2, num_queries=2, stub_depth=1, stub_heads=2, token_buckets=16,
    )


def test_count_params_properties():
    vocab = Vocabulary(["a", "b", "c"], token_buckets=16)
    config = _enum_config()
    learnable, frozen = count_params(ActionLLM(config, vocab))
    wider, _ = count_params(ActionLLM(dataclasses.replace(config, cmib_dim=8), vocab))
    assert wider > learnable

    groups = count_params_by_group(ActionLLM(config, vocab))
    assert groups["embedding"][0] == 0 and groups["stub"][0] == 0
    assert groups["stub"][1] > 0
    assert sum(l for l, _ in groups.values()) == learnable
    assert sum(f for _, f in groups.values()) == frozen

    shared, _ = count_params(ActionLLM(dataclasses.replace(config, shared_past_head=True), vocab))
    assert learnable - shared == 8 * 3

    none = ActionLLM(dataclasses.replace(config, cmib_mode="none"), vocab)
    assert not any(name.startswith(("cmib", "projections")) for name in none.named_params())


def test_no_text_zeroes_text_rows(rng, tiny_config, tiny_vocab):
    model = ActionLLM(dataclasses.replace(tiny_config, use_text=False), tiny_vocab)
    assert_array_equal(model.text_features([0, 1, 2]), np.zeros((3, 8)))


def _grad_instance(rng, config, vocab):
    theta0 = 3
    features, labels = _inputs(rng, theta0, config.feature_dim, config.num_classes)
    segments = [(1, 4), (3, 3), (0, 5)]
    targets = build_targets(labels, segments, config.num_queries, 12, config.num_classes)
    return features, labels, targets


@pytest.mark.parametrize("overrides", [
    {},
    {"cmib_mode": "self"},
    {"cmib_mode": "cross"},
    {"cmib_mode": "none"},
    {"shared_projections": True, "shared_past_head": True},
    {"tune_kernel": 3, "tuning_residual": True},
    {"cmib_depth": 2, "num_queries": 4},
])
def test_model_gradients(float64, rng, tiny_config, tiny_vocab, overrides):
    config = dataclasses.replace(tiny_config, **overrides)
    model = ActionLLM(config, tiny_vocab)
    features, labels, targets = _grad_instance(rng, config, tiny_vocab)

    def f():
        pack, cache = model.forward(features, labels)
        model.backward(total_loss_backward(pack, targets), cache)
        return total_loss(pack, targets).L_total

    assert grad_check(f, model.trainable_parameters()) < 1e-4


def test_freeze_audit_after_steps(rng, tiny_config, tiny_vocab):
    model = ActionLLM(tiny_config, tiny_vocab)
    before = {name: p.value.copy() for name, p in model.named_params().items()}
    opt = Adam(model.parameters(), lr=1e-2)
    for _ in range(10):
        features, labels, targets = _grad_instance(rng, tiny_config, tiny_vocab)
        opt.zero_grad()
        pack, cache = model.forward(features, labels, train_mode=True, rng=rng)
        model.backward(total_loss_backward(pack, targets), cache)
        opt.step()
    changed = [name for name, p in model.named_params().items() if not np.array_equal(p.value, before[name])]
    frozen = [name for name, p in model.named_params().items() if not p.trainable]
    assert frozen and not set(frozen) & set(changed)
    assert changed
    assert "query_bank.queries" in changed
