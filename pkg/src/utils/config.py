"""Configuration management using Pydantic settings and YAML experiment files."""
from pathlib import Path
from typing import Any, Dict, Iterable

import yaml
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.utils.exceptions import ConfigurationError


class Settings(BaseSettings):
    """Process-level settings read from the environment or ``.env``."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Logging Configuration
    log_level: str = Field(default="INFO")
    log_file: str = Field(default="logs/rgba_lab.log")

    # Paths
    config_path: str = Field(default="config/default.yaml")
    output_root: str = Field(default="./runs")

    # Numerics
    torch_threads: int = Field(default=1, ge=1)


settings = Settings()


def load_yaml(path: str) -> Dict[str, Any]:
    """
    Load a YAML mapping from disk.

    Args:
        path: Path to the YAML file

    Returns:
        Parsed mapping (empty dict for an empty file)
    """
    file_path = Path(path)
    if not file_path.exists():
        raise ConfigurationError(f"Config file not found: {path}")

    data = yaml.safe_load(file_path.read_text(encoding="utf-8"))
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"Config file {path} must contain a mapping at top level")
    return data


def apply_overrides(data: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """
    Apply ``key.path=value`` overrides to a nested mapping.

    Values are parsed as YAML scalars, so ``steps=10`` yields an int and
    ``mask_mode=unmasked`` a string.

    Args:
        data: Nested configuration mapping (modified in place)
        overrides: Override expressions

    Returns:
        The updated mapping
    """
    for expression in overrides:
        if "=" not in expression:
            raise ConfigurationError(f"Override must look like key=value: {expression!r}")

        key_path, raw_value = expression.split("=", 1)
        keys = [k for k in key_path.strip().split(".") if k]
        if not keys:
            raise ConfigurationError(f"Empty override key in {expression!r}")

        node = data
        for key in keys[:-1]:
            child = node.setdefault(key, {})
            if not isinstance(child, dict):
                raise ConfigurationError(f"Cannot override inside non-mapping key {key!r}")
            node = child
        node[keys[-1]] = yaml.safe_load(raw_value)

    return data
