#!/usr/bin/env python3
"""
Experiment Configuration Loader for MAMLCon
Discovers the JSON experiment presets in config/ and merges command-line
overrides on top of them.
"""

import copy
import json
import os
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from .error_handling import ConfigurationError

logger = logging.getLogger(__name__)

PRESET_PREFIX = "experiment_"
DEFAULT_PRESET = "default"


def app_dir() -> Path:
    """Repository root of a source checkout."""
    return Path(__file__).resolve().parent.parent


def deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Nested dict merge; values from overrides win, None values are ignored at every depth."""
    merged = copy.deepcopy(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            nested = deep_merge(merged[key] if isinstance(merged.get(key), dict) else {}, value)
            # an all-None section must not create a key the base lacks
            if nested or key in merged:
                merged[key] = nested
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class ExperimentConfigLoader:
    """Loads experiment presets (config/experiment_<name>.json) or explicit JSON files."""

    def __init__(self, config_dir: Optional[str] = None):
        """
        Initialize the experiment configuration loader.

        Args:
            config_dir: Directory containing presets; defaults to MAMLCON_CONFIG_DIR
                        or ./config, falling back to the repository's config/
        """
        self.config_dir = Path(config_dir or os.getenv("MAMLCON_CONFIG_DIR", "config"))
        if not self.config_dir.exists():
            fallback = app_dir() / "config"
            logger.warning(f"Config directory {self.config_dir} does not exist, using fallback {fallback}")
            self.config_dir = fallback
        logger.debug(f"Experiment configuration directory: {self.config_dir}")

        self.available_configs = self._discover_configs()

    def _discover_configs(self) -> Dict[str, str]:
        configs = {}
        if not self.config_dir.exists():
            logger.warning(f"Config directory {self.config_dir} does not exist (cwd {os.getcwd()})")
            return configs

        for config_file in sorted(self.config_dir.glob(f"{PRESET_PREFIX}*.json")):
            configs[config_file.stem[len(PRESET_PREFIX):]] = str(config_file)

        logger.debug(f"Discovered experiment presets: {list(configs)}")
        return configs

    def _resolve(self, name_or_path: Optional[str]) -> str:
        if name_or_path is None:
            name_or_path = os.getenv("MAMLCON_CONFIG", DEFAULT_PRESET)

        if name_or_path in self.available_configs:
            return self.available_configs[name_or_path]
        if Path(name_or_path).is_file():
            return name_or_path
        potential_file = self.config_dir / f"{PRESET_PREFIX}{name_or_path}.json"
        if potential_file.exists():
            return str(potential_file)

        if name_or_path.endswith(".json"):
            raise ConfigurationError(f"Configuration file not found: {name_or_path}", {"path": name_or_path})
        if DEFAULT_PRESET in self.available_configs:
            logger.warning(f"Preset '{name_or_path}' not found, falling back to '{DEFAULT_PRESET}'")
            return self.available_configs[DEFAULT_PRESET]
        raise ConfigurationError(f"No experiment configuration found for '{name_or_path}' and no default preset",
                                 {"config_dir": str(self.config_dir)})

    def load_config(self, name_or_path: Optional[str] = None) -> Dict[str, Any]:
        """
        Load a preset by name or a JSON file by path.

        Args:
            name_or_path: Preset name ('default', 'commands', 'synthetic') or file path;
                          None uses MAMLCON_CONFIG or 'default'

        Returns:
            Raw configuration dictionary
        """
        config_file = self._resolve(name_or_path)
        try:
            with open(config_file, "r", encoding="utf-8") as f:
                config = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Invalid JSON in configuration file {config_file}: {e}", {"path": config_file})

        if not isinstance(config, dict):
            raise ConfigurationError(f"Configuration {config_file} must be a JSON object", {"path": config_file})

        logger.info(f"Loaded experiment configuration {config_file}: "
                    f"{config.get('algorithm', '?')} {config.get('scenario', '?')} K={config.get('k', '?')}")
        return config

    def list_available_configs(self) -> List[str]:
        return list(self.available_configs)

    def get_config_info(self, config_name: str) -> Optional[Dict[str, Any]]:
        """Summary of a preset without keeping it loaded; None if unknown or unreadable."""
        if config_name not in self.available_configs:
            return None
        config_file = self.available_configs[config_name]
        try:
            with open(config_file, "r", encoding="utf-8") as f:
                config = json.load(f)
            return {
                "description": config.get("description", "No description"),
                "algorithm": config.get("algorithm"),
                "scenario": config.get("scenario"),
                "k": config.get("k"),
                "file_path": config_file,
            }
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"Error reading config info for {config_name}: {e}")
            return None


# Global instance for the module
_config_loader: Optional[ExperimentConfigLoader] = None


def get_config_loader(config_dir: Optional[str] = None) -> ExperimentConfigLoader:
    global _config_loader
    if _config_loader is None or (config_dir is not None and Path(config_dir) != _config_loader.config_dir):
        _config_loader = ExperimentConfigLoader(config_dir)
    return _config_loader


def load_experiment_config(name_or_path: Optional[str] = None,
                           overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Load a preset or file and apply overrides on top (overrides win)."""
    config = get_config_loader().load_config(name_or_path)
    return deep_merge(config, overrides or {})
