from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import yaml

from .errors import ConfigError
from .trainer import TrainConfig

_YAML_SUFFIXES = {".yaml", ".yml"}


def _parse_flat(text: str, path: Path) -> Dict[str, Any]:
    raw: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{stripped}'")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: missing key")
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
        try:
            raw[key] = yaml.safe_load(value) if value else None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}:{lineno}: cannot parse value for '{key}': {exc}") from exc
    return raw


def read_config_file(config_path: str | Path) -> Dict[str, Any]:
    """Raw key/value mapping from a flat ``key = value`` file or a YAML mapping."""
    cfg_path = Path(config_path).expanduser()
    if not cfg_path.exists():
        raise ConfigError(f"Config not found: {cfg_path}")
    text = cfg_path.read_text()
    if cfg_path.suffix.lower() not in _YAML_SUFFIXES:
        return _parse_flat(text, cfg_path)
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{cfg_path}: invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("Top-level config must be a YAML mapping")
    return {str(key): value for key, value in raw.items()}


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, tuple):
        if isinstance(value, int) and not isinstance(value, bool):
            items = [value]
        elif isinstance(value, str):
            items = [part for part in value.replace(" ", "").split(",") if part]
        elif isinstance(value, (list, tuple)):
            items = list(value)
        else:
            raise ConfigError(f"'{key}' must be a list of integers, got {value!r}")
        try:
            return tuple(int(item) for item in items)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"'{key}' must be a list of integers, got {value!r}") from exc
    if isinstance(value, bool):
        raise ConfigError(f"'{key}' must be a {type(default).__name__}, got {value!r}")
    if isinstance(value, str) and isinstance(default, (int, float)):
        # YAML 1.1 reads exponent forms like 1e-4 as strings
        try:
            value = float(value)
        except ValueError as exc:
            raise ConfigError(f"'{key}' must be a number, got {value!r}") from exc
    if isinstance(default, int):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if not isinstance(value, int):
            raise ConfigError(f"'{key}' must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"'{key}' must be a number, got {value!r}")
        return float(value)
    return str(value).strip().lower()


def build_train_config(raw: Mapping[str, Any], base: TrainConfig = TrainConfig()) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"Unknown config key(s): {', '.join(unknown)}. Known keys: {', '.join(sorted(known))}")
    values = {
        key: _coerce(key, value, getattr(base, key))
        for key, value in raw.items()
        if value is not None
    }
    return base.with_overrides(**values)


def load_config(
    config_path: Optional[str | Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> TrainConfig:
    """Defaults, then the file, then explicit overrides (``None`` values skipped)."""
    config = TrainConfig()
    if config_path is not None:
        config = build_train_config(read_config_file(config_path), config)
    if overrides:
        config = build_train_config({k: v for k, v in overrides.items() if v is not None}, config)
    config.validate()
    return config
