"""
Configuration management for backdoorlab.

Loads experiment configs (JSON or YAML, chosen by suffix), validates them
against ExperimentConfig with line- and field-addressed error messages, and
exposes environment-driven runtime settings.
"""

import hashlib
import logging
from pathlib import Path
from typing import Any

import orjson
import yaml
from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from .models import ExperimentConfig


logger = logging.getLogger(__name__)

YAML_SUFFIXES = {".yaml", ".yml"}
IDX_PATH_FIELDS = ("train_images", "train_labels", "test_images", "test_labels")


class ConfigurationError(Exception):
    """Raised when configuration is invalid."""
    pass


class RuntimeSettings(BaseSettings):
    """
    Process-level settings read from BACKDOORLAB_* variables or a .env file.

    Attributes:
        workers: Default number of experiment arms run concurrently
        log_level: Root log level when --verbose is not given
    """
    model_config = SettingsConfigDict(env_prefix="BACKDOORLAB_", env_file=".env", extra="ignore")

    workers: int = Field(2, ge=1)
    log_level: str = "INFO"


def format_validation_error(error: ValidationError) -> str:
    """One line per problem, addressed by dotted field path."""
    lines = []
    for item in error.errors():
        path = ""
        for part in item["loc"]:
            path += f"[{part}]" if isinstance(part, int) else (f".{part}" if path else str(part))
        lines.append(f"  {path or '<root>'}: {item['msg']}")
    return "\n".join(lines)


def _parse(config_path: Path, raw: bytes) -> Any:
    if config_path.suffix.lower() in YAML_SUFFIXES:
        try:
            return yaml.safe_load(raw)
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            where = f"  Line {mark.line + 1}, Column {mark.column + 1}\n" if mark else ""
            raise ConfigurationError(
                f"Invalid YAML syntax in {config_path}:\n"
                f"{where}"
                f"  Error: {getattr(e, 'problem', None) or e}"
            ) from e
    try:
        return orjson.loads(raw)
    except orjson.JSONDecodeError as e:
        raise ConfigurationError(
            f"Invalid JSON syntax in {config_path}:\n"
            f"  Line {e.lineno}, Column {e.colno}\n"
            f"  Error: {e.msg}"
        ) from e


def _resolve_paths(data: dict[str, Any], base: Path) -> None:
    """Make IDX and output paths relative to the config file's directory."""
    for key in ("dataset", "downstream"):
        source = data.get(key)
        if isinstance(source, dict) and source.get("kind") == "idx":
            for field in IDX_PATH_FIELDS:
                value = source.get(field)
                if isinstance(value, str) and not Path(value).is_absolute():
                    source[field] = str(base / value)
    output = data.get("output_dir")
    if isinstance(output, str) and not Path(output).is_absolute():
        data["output_dir"] = str(base / output)


class ConfigManager:
    """Manages loading and validating experiment configuration."""

    @staticmethod
    def config_digest(raw: bytes) -> str:
        """sha256 over every config byte."""
        return hashlib.sha256(raw).hexdigest()

    @staticmethod
    def load_config(config_path: Path) -> ExperimentConfig:
        """
        Load and validate an experiment config.

        Relative IDX paths and output_dir are resolved against the config
        file's directory.

        Args:
            config_path: Path to a .json, .yaml or .yml file

        Returns:
            Validated ExperimentConfig

        Raises:
            ConfigurationError: If the file is missing, malformed or fails validation
        """
        if not config_path.exists():
            raise ConfigurationError(
                f"Configuration file not found: {config_path}\n\n"
                f"Create one with:\n"
                f"  backdoorlab init-config {config_path}"
            )

        logger.info("Loading configuration", extra={"path": str(config_path)})
        data = _parse(config_path, config_path.read_bytes())
        if not isinstance(data, dict):
            raise ConfigurationError(
                f"Configuration in {config_path} must be a mapping of top-level keys, "
                f"got {type(data).__name__}"
            )
        _resolve_paths(data, config_path.resolve().parent)

        try:
            config = ExperimentConfig(**data)
        except ValidationError as e:
            raise ConfigurationError(
                f"Configuration validation failed:\n"
                f"{format_validation_error(e)}\n\n"
                f"Check your config file at: {config_path}"
            ) from e

        logger.info("Configuration loaded and validated", extra={
            "scenario": config.scenario.value,
            "defenses": [d.kind for d in config.defenses],
            "seeds": config.seeds,
        })
        return config

    @staticmethod
    def default_config() -> dict[str, Any]:
        """A small synthetic standalone experiment defended by super-fine-tuning."""
        return {
            "version": "1.0",
            "scenario": "standalone",
            "dataset": {
                "kind": "synthetic",
                "num_classes": 4,
                "n_per_class": 100,
                "image_size": 14,
                "noise": 0.1,
                "flip": 0.1,
                "seed": 0,
                "test_fraction": 0.25,
            },
            "attack": {
                "trigger": {"kind": "patch", "size": 3, "position": "bottom-right", "value": 1.0},
                "target_label": 0,
                "poison_ratio": 0.1,
                "seed": 0,
            },
            "attack_training": {
                "epochs": 20,
                "batch_size": 16,
                "schedule": {"kind": "constant", "lr": 0.01},
                "momentum": 0.9,
            },
            "defense": {
                "kind": "super_ft",
                "epochs": 4,
                "schedule": {
                    "kind": "superft",
                    "lr_base": 0.0003,
                    "lr_max1": 0.1,
                    "lr_max2": 0.001,
                    "cycle_len_steps": 19,
                    "phase1_epochs": 2,
                },
            },
            "eval": {"batch_size": 256, "per_epoch": True},
            "sequela": {"mia": False, "reinjection_ratios": []},
            "seeds": [0],
            "output_dir": "results",
        }

    @staticmethod
    def create_default_config(config_path: Path) -> None:
        """
        Write a runnable default configuration (YAML or JSON by suffix).

        Args:
            config_path: Where to create the file
        """
        default = ConfigManager.default_config()
        config_path.parent.mkdir(parents=True, exist_ok=True)
        if config_path.suffix.lower() in YAML_SUFFIXES:
            config_path.write_text(yaml.safe_dump(default, sort_keys=False), encoding="utf-8")
        else:
            config_path.write_bytes(orjson.dumps(default, option=orjson.OPT_INDENT_2))

        print(f"Created default configuration at: {config_path}")
        print("\nNext steps:")
        print(f"1. Edit {config_path}")
        print("2. Pick a trigger kind and defense list")
        print(f"3. Run: backdoorlab run {config_path}")


def load_config(config_path: Path) -> ExperimentConfig:
    """Load configuration (convenience wrapper)."""
    return ConfigManager.load_config(config_path)
