"""
Tests for experiment preset discovery, loading and overrides.
"""

import json
import sys
from pathlib import Path

import pytest

# Add project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from mamlcon import experiment_config
from mamlcon.error_handling import ConfigurationError
from mamlcon.experiment_config import (
    ExperimentConfigLoader,
    app_dir,
    deep_merge,
    get_config_loader,
    load_experiment_config,
)
from mamlcon.harness import RunConfig


@pytest.fixture(autouse=True)
def fresh_loader(monkeypatch):
    """Drop the module-level loader so each test sees its own environment."""
    monkeypatch.setattr(experiment_config, "_config_loader", None)
    monkeypatch.delenv("MAMLCON_CONFIG", raising=False)


class TestDeepMerge:
    """Test nested override merging."""

    @pytest.mark.unit
    def test_nested_values_win(self):
        base = {"k": 5, "meta": {"outer_lr": 0.001, "meta_iterations": 100}}
        merged = deep_merge(base, {"meta": {"meta_iterations": 3}})
        assert merged == {"k": 5, "meta": {"outer_lr": 0.001, "meta_iterations": 3}}
        assert base["meta"]["meta_iterations"] == 100

    @pytest.mark.unit
    def test_none_is_ignored(self):
        assert deep_merge({"k": 5, "seeds": [0]}, {"k": None, "seeds": [1, 2]}) == {"k": 5, "seeds": [1, 2]}

    @pytest.mark.unit
    def test_nested_none_does_not_create_section(self):
        assert deep_merge({"k": 5}, {"meta": {"meta_iterations": None}}) == {"k": 5}
        assert deep_merge({"k": 5}, {"meta": {"meta_iterations": 4, "outer_lr": None}}) == \
            {"k": 5, "meta": {"meta_iterations": 4}}
        assert deep_merge({"meta": {}}, {"meta": {"meta_iterations": None}}) == {"meta": {}}


class TestExperimentConfigLoader:
    """Test preset discovery and resolution."""

    @pytest.mark.unit
    def test_discovers_presets(self, temp_config_dir):
        loader = ExperimentConfigLoader(str(temp_config_dir))
        assert loader.list_available_configs() == ["tiny"]

    @pytest.mark.unit
    def test_load_by_name(self, temp_config_dir):
        loader = ExperimentConfigLoader(str(temp_config_dir))
        config = loader.load_config("tiny")
        assert config["scenario"] == "N4:CS2:CA1"

    @pytest.mark.unit
    def test_load_by_path(self, temp_config_dir, tmp_path):
        path = tmp_path / "mine.json"
        path.write_text(json.dumps({"algorithm": "oml"}), encoding="utf-8")
        assert ExperimentConfigLoader(str(temp_config_dir)).load_config(str(path)) == {"algorithm": "oml"}

    @pytest.mark.unit
    def test_missing_json_file_raises(self, temp_config_dir):
        with pytest.raises(ConfigurationError) as exc_info:
            ExperimentConfigLoader(str(temp_config_dir)).load_config("absent.json")
        assert exc_info.value.details == {"path": "absent.json"}

    @pytest.mark.unit
    def test_unknown_name_without_default_raises(self, temp_config_dir):
        with pytest.raises(ConfigurationError):
            ExperimentConfigLoader(str(temp_config_dir)).load_config("absent")

    @pytest.mark.unit
    def test_unknown_name_falls_back_to_default(self, temp_config_dir):
        (temp_config_dir / "experiment_default.json").write_text(json.dumps({"algorithm": "mamlcon"}),
                                                                 encoding="utf-8")
        assert ExperimentConfigLoader(str(temp_config_dir)).load_config("absent") == {"algorithm": "mamlcon"}

    @pytest.mark.unit
    def test_environment_selects_preset(self, temp_config_dir, env_vars):
        env_vars(MAMLCON_CONFIG="tiny")
        assert ExperimentConfigLoader(str(temp_config_dir)).load_config()["k"] == 2

    @pytest.mark.unit
    @pytest.mark.parametrize("content", ["{not json", "[1, 2]"])
    def test_invalid_files_raise(self, temp_config_dir, content):
        (temp_config_dir / "experiment_broken.json").write_text(content, encoding="utf-8")
        with pytest.raises(ConfigurationError):
            ExperimentConfigLoader(str(temp_config_dir)).load_config("broken")

    @pytest.mark.unit
    def test_config_info(self, temp_config_dir):
        loader = ExperimentConfigLoader(str(temp_config_dir))
        info = loader.get_config_info("tiny")
        assert info["description"] == "tiny synthetic run"
        assert (info["algorithm"], info["scenario"], info["k"]) == ("mamlcon", "N4:CS2:CA1", 2)
        assert loader.get_config_info("absent") is None

    @pytest.mark.unit
    def test_missing_directory_falls_back_to_repository(self, tmp_path):
        loader = ExperimentConfigLoader(str(tmp_path / "nowhere"))
        assert loader.config_dir == app_dir() / "config"

    @pytest.mark.unit
    def test_module_loader_uses_environment_directory(self, temp_config_dir, env_vars):
        env_vars(MAMLCON_CONFIG_DIR=str(temp_config_dir))
        assert get_config_loader().config_dir == temp_config_dir
        config = load_experiment_config("tiny", {"k": 4, "meta": {"meta_iterations": 1}})
        assert config["k"] == 4
        assert config["meta"] == {"outer_lr": 0.001, "meta_iterations": 1, "tasks_per_meta_batch": 2,
                                  "log_every": 1}


class TestShippedPresets:
    """Test that every preset in config/ builds a valid run configuration."""

    @pytest.mark.unit
    @pytest.mark.parametrize("name", ["default", "commands", "synthetic"])
    def test_preset_parses(self, name):
        loader = ExperimentConfigLoader(str(project_root / "config"))
        cfg = RunConfig.from_dict(loader.load_config(name))
        assert cfg.scenario.n_final >= 1
        assert cfg.algorithm in ("mamlcon", "oml", "none")
