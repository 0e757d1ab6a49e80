import json
import logging
import os
import tempfile
from dataclasses import MISSING, fields, is_dataclass
from typing import Any, Dict, Optional, Type, TypeVar

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

T = TypeVar("T")


class ConfigError(ValueError):
    """Invalid or incomplete run configuration; the message names the field."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


def load_config(path: Optional[str]) -> Dict[str, Any]:
    """Load a JSON config file; a missing path means an empty config."""
    if not path:
        return {}
    if not os.path.exists(path):
        raise ConfigError("config", f"file {path} does not exist")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"{path} is not valid JSON ({e})")
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path} must hold a JSON object")
    return data


def merge_overrides(config: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Flag values win over file values; None means the flag was not given."""
    merged = dict(config)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def from_mapping(cls: Type[T], data: Dict[str, Any]) -> T:
    """
    Build a config dataclass from a mapping whose keys mirror the field names

    Args:
        cls: dataclass type
        data (dict): parsed JSON plus flag overrides

    Returns:
        instance of cls

    Raises:
        ConfigError: unknown keys, missing required fields or wrong types
    """
    if not is_dataclass(cls):
        raise TypeError(f"{cls} is not a dataclass")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(unknown[0], "unknown field")

    missing = [name for name, f in known.items()
               if name not in data and f.default is MISSING and f.default_factory is MISSING]
    if missing:
        raise ConfigError(missing[0], "required field is missing")

    try:
        instance = cls(**{name: data[name] for name in known if name in data})
    except (TypeError, ValueError) as e:
        raise ConfigError("config", str(e))
    validate = getattr(instance, "validate", None)
    if callable(validate):
        validate()
    return instance


def atomic_write_text(path: str, text: str) -> None:
    """Write text through a temporary file in the same folder and os.replace it."""
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.splitext(path)[1])
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
