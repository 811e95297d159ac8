#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
测试数据加载与采样
"""

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from src.adapters import Vocabulary
from src.datapipe import (
    ObservationSpec,
    SynthGrammar,
    VideoRecord,
    expand_segments,
    inject_label_noise,
    load_split,
    load_split_root,
    observation_count,
    read_features,
    read_mapping,
    run_length_encode,
    sample_observation,
    synth_corpus,
    write_features,
    write_split,
)
from src.errors import ConsistencyError, EmptyObservationError, InputError, ParseError


def _record(T, K=3, dim=4, seed=0, video_id="v"):
    rng = np.random.default_rng(seed)
    labels = np.arange(T) * K // T
    return VideoRecord(video_id, labels.astype(np.int64), rng.normal(size=(T, dim)).astype(np.float32))


def test_observation_count_examples():
    assert observation_count(1000, 0.3, 8) == 37
    assert observation_count(300, 0.2, 6) == 10
    assert observation_count(10, 0.2, 8) == 0


def test_sample_observation_bounds():
    v = _record(1000)
    obs = sample_observation(v, ObservationSpec(0.3, 0.5, 8, 7))
    assert obs.theta0 == 37
    assert obs.frames[0] == 7
    assert np.all(np.diff(obs.frames) == 8)
    assert obs.frames.max() < 300
    assert obs.observed == 300
    assert obs.horizon == 500
    assert_array_equal(expand_segments(obs.segments), v.gt_labels[300:800])
    assert_array_equal(obs.features, v.features[obs.frames])


def test_sample_observation_empty():
    with pytest.raises(EmptyObservationError):
        sample_observation(_record(10), ObservationSpec(0.2, 0.5, 8, 0))


def test_sample_observation_defaults_to_gt_track():
    v = _record(100)
    v.predicted_labels = (v.gt_labels + 1) % 3
    assert_array_equal(sample_observation(v, ObservationSpec(0.3, 0.5, 4, 0)).input_labels, v.gt_labels[0:30:4])
    obs = sample_observation(v, ObservationSpec(0.3, 0.5, 4, 0), input_labels=v.predicted_labels)
    assert_array_equal(obs.input_labels, v.predicted_labels[0:30:4])


def test_observation_spec_guards():
    with pytest.raises(InputError):
        ObservationSpec(0.6, 0.5)
    with pytest.raises(InputError):
        ObservationSpec(0.2, 0.5, 4, 4)
    with pytest.raises(InputError):
        ObservationSpec(0.2, 0.5, 0)


def test_run_length_round_trip(rng):
    labels = rng.integers(0, 3, size=200)
    segments = run_length_encode(labels)
    assert_array_equal(expand_segments(segments), labels)
    assert all(a[0] != b[0] for a, b in zip(segments, segments[1:]))
    assert run_length_encode([]) == []


def test_label_noise():
    labels = np.arange(20) % 5
    assert_array_equal(inject_label_noise(labels, 0.0, 5, np.random.default_rng(0)), labels)
    flipped = inject_label_noise(labels, 1.0, 5, np.random.default_rng(0))
    assert np.all(flipped != labels)
    assert np.all((flipped >= 0) & (flipped < 5))
    a = inject_label_noise(labels, 0.3, 5, np.random.default_rng(7))
    b = inject_label_noise(labels, 0.3, 5, np.random.default_rng(7))
    assert_array_equal(a, b)
    with pytest.raises(InputError):
        inject_label_noise(labels, 1.5, 5, np.random.default_rng(0))


def test_label_noise_rate():
    n, p = 10000, 0.2
    labels = np.zeros(n, dtype=np.int64)
    changed = np.mean(inject_label_noise(labels, p, 6, np.random.default_rng(1)) != labels)
    sigma = np.sqrt(p * (1 - p) / n)
    assert abs(changed - p) < 3 * sigma


@pytest.fixture
def toy_split(tmp_path):
    vocab = Vocabulary(["cut_bread", "take_plate", "pour_milk"])
    records = [
        VideoRecord("a", np.array([0, 0, 1, 1, 2]), np.arange(10, dtype=np.float32).reshape(5, 2)),
        VideoRecord("b", np.array([2, 2, 2]), np.ones((3, 2), dtype=np.float32),
                    predicted_labels=np.array([2, 1, 2])),
    ]
    write_split(tmp_path, vocab, {"train": records})
    return tmp_path, vocab, records


def test_split_round_trip(toy_split):
    root, vocab, records = toy_split
    loaded_vocab, loaded = load_split_root(root, "train")
    assert loaded_vocab.names == vocab.names
    assert [r.id for r in loaded] == ["a", "b"]
    for want, got in zip(records, loaded):
        assert_array_equal(got.gt_labels, want.gt_labels)
        assert_array_equal(got.features, want.features)
    assert loaded[0].predicted_labels is None
    assert_array_equal(loaded[1].predicted_labels, [2, 1, 2])


def test_feature_row_mismatch(toy_split):
    root, _, _ = toy_split
    write_features(root / "features" / "a.feat", np.zeros((4, 2)))
    with pytest.raises(ConsistencyError, match="video a"):
        load_split_root(root, "train")


def test_unknown_action_name(toy_split):
    root, _, _ = toy_split
    (root / "groundTruth" / "b.txt").write_text("pour_milk\nfly\npour_milk\n")
    with pytest.raises(ParseError) as err:
        load_split(root / "mapping.txt", root / "bundles" / "train.txt", root / "groundTruth", root / "features")
    assert err.value.line == 2


def test_mapping_errors(tmp_path):
    path = tmp_path / "mapping.txt"
    path.write_text("0 cut\n0 place\n")
    with pytest.raises(ParseError):
        read_mapping(path)
    path.write_text("0 cut\n2 place\n")
    with pytest.raises(ParseError):
        read_mapping(path)


def test_feature_file_header(tmp_path):
    path = tmp_path / "x.feat"
    write_features(path, np.ones((2, 3)))
    blob = path.read_bytes()
    assert blob[:4] == b"AFV1"
    assert len(blob) == 12 + 4 * 6
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ParseError):
        read_features(path)
    path.write_bytes(blob[:-4])
    with pytest.raises(ParseError):
        read_features(path)


def test_grammar_is_single_cycle():
    g = SynthGrammar.generate(8, seed=3)
    seen, c = [], 0
    for _ in range(8):
        seen.append(c)
        c = g.successor[c]
    assert sorted(seen) == list(range(8)) and c == 0
    with pytest.raises(InputError):
        SynthGrammar(3, [0, 0, 1], [(2, 2)] * 3)


def test_synth_corpus_follows_grammar():
    g = SynthGrammar.generate(4, seed=1, min_len=5, max_len=9)
    records = synth_corpus(g, 5, (60, 80), 6, noise=0.1)
    for r in records:
        segments = run_length_encode(r.gt_labels)
        for (a, _), (b, _) in zip(segments, segments[1:]):
            assert g.successor[a] == b
        # interior segments have the fixed per-class length
        for cls, length in segments[1:-1]:
            assert length == g.durations[cls][0]
    again = synth_corpus(g, 5, (60, 80), 6, noise=0.1)
    for a, b in zip(records, again):
        assert_array_equal(a.gt_labels, b.gt_labels)
        assert_array_equal(a.features, b.features)


def test_synth_corpus_start_phase():
    g = SynthGrammar.generate(4, seed=1, min_len=5, max_len=9)
    for r in synth_corpus(g, 8, (60, 80), 6, noise=0.1):
        cls, length = run_length_encode(r.gt_labels)[0]
        assert length == g.durations[cls][0]
    openings = [run_length_encode(r.gt_labels)[0] for r in synth_corpus(g, 8, (60, 80), 6, partial_start=True)]
    assert all(length <= g.durations[cls][0] for cls, length in openings)
    assert any(length < g.durations[cls][0] for cls, length in openings)


def test_synth_features_are_class_conditioned():
    g = SynthGrammar.generate(4, seed=2, min_len=5, max_len=9)
    records = synth_corpus(g, 10, (80, 100), 8, noise=0.3)
    labels = np.concatenate([r.gt_labels for r in records])
    feats = np.concatenate([r.features for r in records])
    means = np.stack([feats[labels == c].mean(axis=0) for c in range(4)])
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.linalg.norm(means[i] - means[j]) > 0.1
