#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
测试配置解析与检查点
"""

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from src.backbone import ActionLLM
from src.config import ModelConfig, RunConfig, parse_key_values
from src.errors import InputError, IntegrityError, ParseError
from src.utils import chunks, format_count, load_checkpoint, restore_model, save_checkpoint


def test_parse_key_values():
    values = parse_key_values("# header\nlr = 0.01\n\nepochs=3  # short run\n")
    assert values == {"lr": "0.01", "epochs": "3"}
    with pytest.raises(ParseError) as err:
        parse_key_values("lr=0.1\noops\n", source="run.cfg")
    assert err.value.line == 2
    assert "run.cfg:2" in str(err.value)


def test_precedence_preset_file_cli(tmp_path):
    path = tmp_path / "run.txt"
    path.write_text("preset=salads50\nlr=0.05\n")
    config = RunConfig.from_file(path)
    assert config.sample_rate == 8
    assert config.lr == 0.05
    config.update({"lr": 0.2}, source="command line")
    assert config.lr == 0.2
    assert RunConfig.from_file(path, preset="breakfast").sample_rate == 6


def test_update_errors():
    config = RunConfig()
    with pytest.raises(ParseError):
        config.update({"learning_rate": "1"})
    with pytest.raises(ParseError):
        config.update({"freeze_audit": "maybe"})
    with pytest.raises(ParseError):
        config.update({"epochs": "many"})
    config.update({"train_alphas": "0.2,0.3,0.5", "use_text": "false", "num_queries": "4"})
    assert config.train_alphas == (0.2, 0.3, 0.5)
    assert config.model.use_text is False
    assert config.model.num_queries == 4


def test_text_round_trip(tmp_path):
    config = RunConfig.from_preset("breakfast")
    config.update({"noise_p": 0.3, "shared_past_head": True, "cmib_mode": "self"})
    config.save(tmp_path / "config.txt")
    again = RunConfig.from_file(tmp_path / "config.txt")
    assert again.to_text() == config.to_text()
    assert again.model.fingerprint() == config.model.fingerprint()


def test_fingerprint_tracks_architecture():
    a = ModelConfig()
    b = ModelConfig(num_queries=a.num_queries + 1)
    assert len(a.fingerprint()) == 16
    assert a.fingerprint() == ModelConfig().fingerprint()
    assert a.fingerprint() != b.fingerprint()


def test_validation():
    with pytest.raises(InputError):
        ModelConfig(cmib_dim=10, cmib_heads=4).validate()
    with pytest.raises(InputError):
        ModelConfig(tune_kernel=2).validate()
    with pytest.raises(InputError):
        RunConfig(sample_rate=4, train_start_max=4).validate()
    with pytest.raises(InputError):
        RunConfig(loss_terms="T,X").validate()
    with pytest.raises(InputError):
        RunConfig.from_preset("kinetics")


def test_checkpoint_round_trip(tmp_path, tiny_config, tiny_vocab, rng):
    model = ActionLLM(tiny_config, tiny_vocab)
    path = save_checkpoint(tmp_path / "m.allm", model)
    ckpt = load_checkpoint(path, expected_fingerprint=tiny_config.fingerprint())
    assert ckpt.class_names == tiny_vocab.names
    restored = restore_model(ckpt)
    for (name, p), (other, q) in zip(model.named_params().items(), restored.named_params().items()):
        assert name == other
        assert_array_equal(p.value, q.value)
        assert p.trainable == q.trainable

    features = rng.normal(size=(3, 6)).astype(np.float32)
    labels = np.array([0, 1, 1])
    assert_array_equal(model.predict(features, labels).class_logits, restored.predict(features, labels).class_logits)


def test_checkpoint_refusals(tmp_path, tiny_config, tiny_vocab):
    model = ActionLLM(tiny_config, tiny_vocab)
    path = save_checkpoint(tmp_path / "m.allm", model)
    blob = path.read_bytes()

    with pytest.raises(IntegrityError):
        load_checkpoint(path, expected_fingerprint="0" * 16)

    bad = tmp_path / "bad.allm"
    bad.write_bytes(b"XLLM" + blob[4:])
    with pytest.raises(IntegrityError):
        load_checkpoint(bad)
    bad.write_bytes(blob[:4] + (99).to_bytes(4, "little") + blob[8:])
    with pytest.raises(IntegrityError):
        load_checkpoint(bad)
    bad.write_bytes(blob[:-10])
    with pytest.raises(IntegrityError):
        load_checkpoint(bad)
    bad.write_bytes(blob + b"\0")
    with pytest.raises(IntegrityError):
        load_checkpoint(bad)
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "missing.allm")


def test_helpers():
    assert format_count(950) == "950"
    assert format_count(4_210_000) == "4.21M"
    assert format_count(7e9) == "7.00B"
    assert list(chunks(range(5), 2)) == [[0, 1], [2, 3], [4]]
