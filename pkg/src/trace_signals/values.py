"""Value model stored in signals and histories.

A Value is plain Python data: ``None``, ``bool``, ``int`` (64-bit signed),
``float`` (64-bit binary), ``str``, ``list`` of Values, or ``dict`` mapping
``str`` to Values. The encoded form is JSON in which a float becomes
``{"$f": "<16 hex digits>"}`` (its exact bit pattern) and a map becomes
``{"$m": {...}}``, so the two tags never collide with user data.
"""

from __future__ import annotations

import json
import struct
from typing import Any, TypeAlias

from .errors import InvalidValue

Value: TypeAlias = None | bool | int | float | str | list["Value"] | dict[str, "Value"]

INT_MIN = -(2**63)
INT_MAX = 2**63 - 1
FLOAT_TAG = "$f"
MAP_TAG = "$m"


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def encode_value(value: Any, path: str = "value") -> Any:
    if value is None or isinstance(value, (bool, str)):
        return value
    if isinstance(value, int):
        if not INT_MIN <= value <= INT_MAX:
            raise InvalidValue(f"{path}: integer {value} outside the signed 64-bit range")
        return value
    if isinstance(value, float):
        return {FLOAT_TAG: struct.pack(">d", value).hex()}
    if isinstance(value, list):
        return [encode_value(item, f"{path}[{i}]") for i, item in enumerate(value)]
    if isinstance(value, dict):
        encoded = {}
        for key, item in value.items():
            if not isinstance(key, str):
                raise InvalidValue(f"{path}: map keys must be strings, got {type(key).__name__}")
            encoded[key] = encode_value(item, f"{path}.{key}")
        return {MAP_TAG: encoded}
    raise InvalidValue(f"{path}: unsupported value type {type(value).__name__}")


def decode_value(data: Any, path: str = "value") -> Value:
    if data is None or isinstance(data, (bool, str)):
        return data
    if isinstance(data, int):
        if not INT_MIN <= data <= INT_MAX:
            raise InvalidValue(f"{path}: integer {data} outside the signed 64-bit range")
        return data
    if isinstance(data, list):
        return [decode_value(item, f"{path}[{i}]") for i, item in enumerate(data)]
    if isinstance(data, dict) and len(data) == 1:
        if FLOAT_TAG in data:
            bits = data[FLOAT_TAG]
            if not isinstance(bits, str) or len(bits) != 16:
                raise InvalidValue(f"{path}: float tag needs 16 hex digits")
            try:
                return struct.unpack(">d", bytes.fromhex(bits))[0]
            except ValueError as e:
                raise InvalidValue(f"{path}: bad float bits {bits!r}") from e
        if MAP_TAG in data and isinstance(data[MAP_TAG], dict):
            return {key: decode_value(item, f"{path}.{key}") for key, item in data[MAP_TAG].items()}
    raise InvalidValue(f"{path}: cannot decode {data!r}")


def check_value(value: Any) -> Value:
    """Validate ``value`` and return a private deep copy of it."""
    return decode_value(encode_value(value))


def copy_value(value: Value) -> Value:
    return decode_value(encode_value(value))


def value_key(value: Value) -> str:
    return canonical_json(encode_value(value))


def values_equal(a: Value, b: Value) -> bool:
    """Deep equality on the tagged form: ``1 != 1.0 != True`` and NaN equals itself."""
    return value_key(a) == value_key(b)


def render_value(value: Value) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, list):
        return "[" + ", ".join(render_value(item) for item in value) + "]"
    return "{" + ", ".join(f"{json.dumps(k, ensure_ascii=False)}: {render_value(v)}" for k, v in sorted(value.items())) + "}"
