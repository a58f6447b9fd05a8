"""
Pytest configuration and shared fixtures for MAMLCon tests.

This module provides small model configurations, seeded generators,
synthetic datasets and episodes shared by the test modules.
"""

import json
import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Configure UTF-8 encoding for proper Unicode handling
os.environ['PYTHONIOENCODING'] = 'utf-8'

# Add the project root to Python path for imports
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from mamlcon.data import SyntheticSpec, synth_generate
from mamlcon.episodes import LabeledDataset, ScenarioSpec, sample_episode
from mamlcon.models import ModelConfig


@pytest.fixture(scope="session")
def project_root_path():
    """Return the project root directory path."""
    return project_root


@pytest.fixture
def rng():
    """Seeded generator; every test gets a fresh one."""
    return np.random.default_rng(0)


@pytest.fixture
def small_conv_config():
    """Three stride-2 convolutions on a 15x15 input: 15 -> 7 -> 3 -> 1."""
    return ModelConfig(input_shape=(1, 15, 15), head_classes=5, conv_channels=(2, 3, 4), kernel=(3, 3), stride=2)


@pytest.fixture
def mlp_config():
    """MLP over 4-dimensional vector features with a 6-way head."""
    return ModelConfig(input_shape=(1, 1, 4), head_classes=6, architecture="mlp", hidden=(8, 8))


@pytest.fixture
def synthetic_dataset():
    """12 well-separated Gaussian classes in 4 dimensions, 12 examples each."""
    spec = SyntheticSpec(n_classes=12, dim=4, examples_per_class=12, cluster_separation=6.0, seed=0)
    return LabeledDataset.from_archive(synth_generate(spec))


@pytest.fixture
def scenario():
    """Six classes, two at first, then two per step, three shots."""
    return ScenarioSpec(n_final=6, cs=2, ca=2, k=3)


@pytest.fixture
def episode(synthetic_dataset, scenario):
    """One episode of the shared scenario with a 6-way head."""
    return sample_episode(synthetic_dataset, scenario, 6, np.random.default_rng(1), k_test=4)


@pytest.fixture
def temp_config_dir(tmp_path):
    """Config directory holding a minimal synthetic preset named 'tiny'."""
    config_dir = tmp_path / "config"
    config_dir.mkdir()
    preset = {
        "description": "tiny synthetic run",
        "algorithm": "mamlcon",
        "scenario": "N4:CS2:CA1",
        "k": 2,
        "k_test": 3,
        "episodes_per_eval": 2,
        "seeds": [0],
        "data": {
            "synthetic": {"n_classes": 10, "dim": 4, "examples_per_class": 8, "cluster_separation": 5.0, "seed": 0},
            "heldout_classes": 5,
        },
        "model": {"architecture": "mlp", "hidden": [8]},
        "inner": {"t_initial": 3, "t_step": 2, "inner_lr": 0.01},
        "meta": {"outer_lr": 0.001, "meta_iterations": 2, "tasks_per_meta_batch": 2, "log_every": 1},
    }
    (config_dir / "experiment_tiny.json").write_text(json.dumps(preset, indent=2), encoding="utf-8")
    return config_dir


@pytest.fixture
def env_vars(monkeypatch):
    """Fixture to set environment variables for testing."""
    def _set_env_vars(**kwargs):
        for key, value in kwargs.items():
            monkeypatch.setenv(key, value)
    return _set_env_vars


def pytest_configure(config):
    """Configure pytest markers."""
    config.addinivalue_line(
        "markers", "unit: Fast tests of a single function or class"
    )
    config.addinivalue_line(
        "markers", "integration: Tests that run several modules together"
    )
    config.addinivalue_line(
        "markers", "slow: Tests that take longer to run"
    )
    config.addinivalue_line(
        "markers", "property: Hypothesis property tests"
    )
    config.addinivalue_line(
        "markers", "cli: Tests of the command line interface"
    )


def pytest_collection_modifyitems(config, items):
    """Add markers based on test file and test names."""
    for item in items:
        if "test_cli" in item.fspath.basename:
            item.add_marker(pytest.mark.cli)

        if "integration" in item.name or "end_to_end" in item.fspath.basename:
            item.add_marker(pytest.mark.integration)
        elif item.get_closest_marker("slow") is None and item.get_closest_marker("integration") is None:
            item.add_marker(pytest.mark.unit)
