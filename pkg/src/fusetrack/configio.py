"""YAML config loading with schema-version checks.

All on-disk configs carry a `schema_version` so stale files fail loudly
instead of producing silently wrong geometry.
"""

from __future__ import annotations

import importlib.resources
from pathlib import Path

import yaml


class ConfigError(Exception):
    """Malformed or inconsistent configuration input."""


def load_yaml(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid yaml in {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping at top level of {path}")
    return data


def load_packaged_yaml(name: str) -> dict:
    ref = importlib.resources.files("fusetrack").joinpath("data", name)
    with ref.open("r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    return data


def require_schema(cfg: dict, expected: int, what: str) -> None:
    got = cfg.get("schema_version")
    if got != expected:
        raise ConfigError(f"{what}: schema_version {got!r}, expected {expected}")


def dump_yaml(data: dict, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(data, f, sort_keys=True, default_flow_style=False)
