"""Pytest configuration and shared fixtures."""

import pytest

from stream_tracker.tracker import StreamingTracker
from tests.fixtures.sample_data import (
    sample_sequence,
    saved_sequence,
    scene_config,
    tiny_model_config,
    tiny_train_config,
)


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="Run toy training acceptance tests.")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config():
    """Tiny model config (D=8)."""
    return tiny_model_config()


@pytest.fixture
def tiny_tracker(tiny_config):
    """Freshly initialized tiny tracker."""
    return StreamingTracker(tiny_config, seed=0)


@pytest.fixture
def train_config():
    """Two-step training config on the tiny model."""
    return tiny_train_config()


@pytest.fixture
def scene():
    """32 x 32, four-frame scene config."""
    return scene_config()


@pytest.fixture
def sequence():
    """Generated four-frame sequence with ground truth."""
    return sample_sequence()


@pytest.fixture
def sequence_dir(tmp_path):
    """Sequence saved to disk; yields (directory, record)."""
    return saved_sequence(tmp_path / "seq")
