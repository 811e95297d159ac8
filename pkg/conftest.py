#!/usr/bin/env python
# -*- coding: utf-8 -*-

import numpy as np
import pytest

from src.adapters import Vocabulary
from src.config import ModelConfig
from src.tensorkit import precision


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run closed-loop training tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-epoch training runs, skipped without --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def float64():
    """Run the test in float64 (test precision)."""
    with precision("test"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_vocab():
    return Vocabulary(["cut_tomato", "place_plate", "pour_milk", "stir"], token_buckets=16)


@pytest.fixture
def tiny_config():
    return ModelConfig(
        num_classes=4, feature_dim=6, embed_dim=8, adapter_dim=4, cmib_dim=4, cmib_heads=2,
        tune_dim=2, num_queries=2, stub_depth=1, stub_heads=2, token_buckets=16,
    )
