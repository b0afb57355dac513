"""
Flat TOML configuration files and their merge with command-line values.

Precedence: command-line value > config file > dataclass default.
"""

import json
import logging
import tomllib
from dataclasses import asdict, fields
from enum import Enum
from pathlib import Path
from typing import Any

from revex.errors import ConfigError, InvalidInputError
from revex.losses import LossConfig
from revex.model import ModelConfig
from revex.training import TrainConfig

logger = logging.getLogger(__name__)

SECTIONS = {"model": ModelConfig, "loss": LossConfig, "train": TrainConfig}
# fields not settable from a flat file
_NESTED = {"stft"}


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)} - _NESTED


def read_config_file(path: Path) -> dict[str, Any]:
    """
    Raises:
        ConfigError: unreadable TOML, nested tables, or unknown keys
    """
    if not path.is_file():
        raise ConfigError(f"Config file '{path}' not found")
    try:
        values = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"'{path}' is not valid TOML: {e}") from e
    tables = [k for k, v in values.items() if isinstance(v, dict)]
    if tables:
        raise ConfigError(f"'{path}' must be flat key = value pairs, found tables {tables}")
    known = set().union(*(_field_names(cls) for cls in SECTIONS.values()))
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown config keys in '{path}': {unknown}")
    return values


def _coerce(name: str, value: Any, default: Any) -> Any:
    if isinstance(default, Enum):
        return type(default)(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"'{name}' must be true or false, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int | float) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, tuple) and isinstance(value, list | tuple):
        return tuple(value)
    if not isinstance(value, type(default)) or isinstance(value, bool) != isinstance(default, bool):
        raise ConfigError(f"'{name}' expects {type(default).__name__}, got {value!r}")
    return value


def build_configs(
    file_values: dict[str, Any] | None = None,
    overrides: dict[str, Any] | None = None,
    model: ModelConfig | None = None,
) -> tuple[ModelConfig, LossConfig, TrainConfig]:
    """
    Merge file values and command-line overrides (None means unset) onto
    the defaults; model is the base ModelConfig, desk scale when omitted.

    Raises:
        ConfigError: a value of the wrong type or out of range
    """
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    bases = {"model": model or ModelConfig.desk(), "loss": LossConfig(), "train": TrainConfig()}
    built = {}
    for section, base in bases.items():
        changes = {}
        for name in _field_names(type(base)) & set(merged):
            try:
                changes[name] = _coerce(name, merged[name], getattr(base, name))
            except ValueError as e:
                raise ConfigError(f"Bad value for '{name}': {e}") from e
        try:
            built[section] = type(base)(**{**{f.name: getattr(base, f.name) for f in fields(base)}, **changes})
        except InvalidInputError as e:
            raise ConfigError(str(e)) from e
    return built["model"], built["loss"], built["train"]


def _jsonable(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [_jsonable(v) for v in value]
    return value


def write_effective_config(out_dir: Path, **sections: Any) -> Path:
    """Dump every config section, dataclasses included, to effective_config.json."""
    out_dir.mkdir(parents=True, exist_ok=True)
    data = {name: asdict(value) if hasattr(value, "__dataclass_fields__") else value for name, value in sections.items()}
    path = out_dir / "effective_config.json"
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True), encoding="utf-8")
    logger.info("effective configuration written to %s", path)
    return path
