"""Field readers used by the ``from_dict`` parsers of every config section."""

from __future__ import annotations

from enum import Enum
from typing import Any, Iterable, TypeVar

from diffdf.errors import ConfigError

E = TypeVar("E", bound=Enum)

_MISSING: Any = object()


def get(data: dict, key: str, default: Any = _MISSING) -> Any:
    """Read *key* from *data*, accepting the kebab-case spelling too."""
    if key in data:
        return data[key]
    kebab = key.replace("_", "-")
    if kebab in data:
        return data[kebab]
    return default


def reject_unknown(data: dict, allowed: Iterable[str], prefix: str) -> None:
    known = set()
    for key in allowed:
        known.add(key)
        known.add(key.replace("_", "-"))
    unknown = sorted(str(k) for k in data if k not in known)
    if unknown:
        raise ConfigError(f"{prefix} has unknown key(s): {', '.join(unknown)}")


def require_mapping(value: Any, name: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{name} must be a mapping")
    return value


def read_int(
    data: dict,
    key: str,
    prefix: str,
    default: Any = _MISSING,
    *,
    minimum: int | None = None,
) -> int:
    value = get(data, key, default)
    name = f"{prefix}.{key}"
    if value is _MISSING:
        raise ConfigError(f"{name} is required")
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}")
    return value


def read_float(
    data: dict,
    key: str,
    prefix: str,
    default: Any = _MISSING,
    *,
    minimum: float | None = None,
    positive: bool = False,
    below: float | None = None,
) -> float:
    value = get(data, key, default)
    name = f"{prefix}.{key}"
    if value is _MISSING:
        raise ConfigError(f"{name} is required")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number")
    value = float(value)
    if positive and not value > 0:
        raise ConfigError(f"{name} must be a positive number")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}")
    if below is not None and not value < below:
        raise ConfigError(f"{name} must be < {below}")
    return value


def read_optional_float(
    data: dict, key: str, prefix: str, *, positive: bool = False
) -> float | None:
    value = get(data, key, None)
    if value is None:
        return None
    return read_float({key: value}, key, prefix, positive=positive)


def read_bool(data: dict, key: str, prefix: str, default: Any = _MISSING) -> bool:
    value = get(data, key, default)
    if value is _MISSING:
        raise ConfigError(f"{prefix}.{key} is required")
    if not isinstance(value, bool):
        raise ConfigError(f"{prefix}.{key} must be a boolean")
    return value


def read_str(
    data: dict, key: str, prefix: str, default: Any = _MISSING
) -> str | None:
    value = get(data, key, default)
    if value is _MISSING:
        raise ConfigError(f"{prefix}.{key} is required")
    if value is None:
        return None
    if not isinstance(value, str) or not value.strip():
        raise ConfigError(f"{prefix}.{key} must be a non-empty string when set")
    return value


def read_enum(
    data: dict, key: str, prefix: str, enum: type[E], default: Any = _MISSING
) -> E:
    value = get(data, key, default)
    if value is _MISSING:
        raise ConfigError(f"{prefix}.{key} is required")
    if isinstance(value, enum):
        return value
    try:
        return enum(value)
    except ValueError:
        choices = ", ".join(str(m.value) for m in enum)
        raise ConfigError(
            f"{prefix}.{key} must be one of: {choices} (got {value!r})"
        ) from None
