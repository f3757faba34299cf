"""Canonical, self-describing binary codec.

Every value that travels inside an envelope or is referenced by a trace record
is encoded with this codec.  The encoding is unique per value, so the SHA-256
of the encoding (``digest_of``) is a stable identity for materials.

Layout (all lengths big-endian)::

    bytes      0x01 len:u32 data
    int        0x02 len:u8  two's-complement, minimal length
    str        0x03 len:u32 utf-8
    None       0x04
    sequence   0x05 count:u32 item*
    bool       0x06 0x00|0x01
    enum       0x07 code:u16 len:u32 utf-8 value
    dataclass  0x10 code:u16 count:u8 field*

Sequences always decode to tuples.  Dataclasses and enums must be registered
with a fixed numeric code via :func:`register` / :func:`register_enum`.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import struct
from typing import Any, Callable, TypeVar

T = TypeVar("T")


class MalformedEncoding(ValueError):
    """Raised when bytes do not form exactly one canonical value."""


_BYTES, _INT, _STR, _NONE, _SEQ, _BOOL, _ENUM, _DC = 1, 2, 3, 4, 5, 6, 7, 0x10

_CLASS_BY_CODE: dict[int, type] = {}
_CODE_BY_CLASS: dict[type, int] = {}
_ENUM_BY_CODE: dict[int, type] = {}
_CODE_BY_ENUM: dict[type, int] = {}


def register(code: int) -> Callable[[type[T]], type[T]]:
    """Class decorator assigning a wire code to a frozen dataclass."""

    def wrap(cls: type[T]) -> type[T]:
        if not dataclasses.is_dataclass(cls):
            raise TypeError(f"{cls.__name__} is not a dataclass")
        if code in _CLASS_BY_CODE and _CLASS_BY_CODE[code] is not cls:
            raise ValueError(f"type code {code} already used by {_CLASS_BY_CODE[code].__name__}")
        _CLASS_BY_CODE[code] = cls
        _CODE_BY_CLASS[cls] = code
        return cls

    return wrap


def register_enum(code: int) -> Callable[[type[T]], type[T]]:
    def wrap(cls: type[T]) -> type[T]:
        if code in _ENUM_BY_CODE and _ENUM_BY_CODE[code] is not cls:
            raise ValueError(f"enum code {code} already used")
        _ENUM_BY_CODE[code] = cls
        _CODE_BY_ENUM[cls] = code
        return cls

    return wrap


def registered_types() -> list[type]:
    return [_CLASS_BY_CODE[c] for c in sorted(_CLASS_BY_CODE)]


def _encode_into(value: Any, out: bytearray) -> None:
    # bool before int: bool is an int subclass
    if isinstance(value, bool):
        out += bytes((_BOOL, 1 if value else 0))
    elif isinstance(value, enum.Enum):
        code = _CODE_BY_ENUM.get(type(value))
        if code is None:
            raise TypeError(f"unregistered enum {type(value).__name__}")
        raw = str(value.value).encode()
        out += struct.pack(">BHI", _ENUM, code, len(raw)) + raw
    elif isinstance(value, (bytes, bytearray)):
        out += struct.pack(">BI", _BYTES, len(value)) + bytes(value)
    elif isinstance(value, int):
        size = (value.bit_length() + 8) // 8
        if size > 255:
            raise ValueError("integer too large for the codec")
        out += bytes((_INT, size)) + value.to_bytes(size, "big", signed=True)
    elif isinstance(value, str):
        raw = value.encode()
        out += struct.pack(">BI", _STR, len(raw)) + raw
    elif value is None:
        out.append(_NONE)
    elif isinstance(value, (tuple, list)):
        out += struct.pack(">BI", _SEQ, len(value))
        for item in value:
            _encode_into(item, out)
    elif dataclasses.is_dataclass(value) and not isinstance(value, type):
        code = _CODE_BY_CLASS.get(type(value))
        if code is None:
            raise TypeError(f"unregistered material type {type(value).__name__}")
        fields = dataclasses.fields(value)
        out += struct.pack(">BHB", _DC, code, len(fields))
        for f in fields:
            _encode_into(getattr(value, f.name), out)
    else:
        raise TypeError(f"cannot encode {type(value).__name__}")


def encode(value: Any) -> bytes:
    out = bytearray()
    _encode_into(value, out)
    return bytes(out)


def _need(data: bytes, pos: int, n: int) -> None:
    if pos + n > len(data):
        raise MalformedEncoding("truncated input")


def _decode_at(data: bytes, pos: int, depth: int) -> tuple[Any, int]:
    if depth > 64:
        raise MalformedEncoding("nesting too deep")
    _need(data, pos, 1)
    tag = data[pos]
    pos += 1
    if tag == _BYTES:
        _need(data, pos, 4)
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        _need(data, pos, n)
        return bytes(data[pos : pos + n]), pos + n
    if tag == _INT:
        _need(data, pos, 1)
        n = data[pos]
        pos += 1
        if n == 0:
            raise MalformedEncoding("zero-length integer")
        _need(data, pos, n)
        value = int.from_bytes(data[pos : pos + n], "big", signed=True)
        if (value.bit_length() + 8) // 8 != n:
            raise MalformedEncoding("non-minimal integer")
        return value, pos + n
    if tag == _STR:
        _need(data, pos, 4)
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        _need(data, pos, n)
        try:
            return data[pos : pos + n].decode(), pos + n
        except UnicodeDecodeError as exc:
            raise MalformedEncoding("invalid utf-8") from exc
    if tag == _NONE:
        return None, pos
    if tag == _BOOL:
        _need(data, pos, 1)
        if data[pos] not in (0, 1):
            raise MalformedEncoding("invalid bool")
        return bool(data[pos]), pos + 1
    if tag == _SEQ:
        _need(data, pos, 4)
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if n > len(data) - pos:
            raise MalformedEncoding("sequence count exceeds input")
        items = []
        for _ in range(n):
            item, pos = _decode_at(data, pos, depth + 1)
            items.append(item)
        return tuple(items), pos
    if tag == _ENUM:
        _need(data, pos, 6)
        code, n = struct.unpack_from(">HI", data, pos)
        pos += 6
        _need(data, pos, n)
        cls = _ENUM_BY_CODE.get(code)
        if cls is None:
            raise MalformedEncoding(f"unknown enum code {code}")
        try:
            return cls(data[pos : pos + n].decode()), pos + n
        except (ValueError, UnicodeDecodeError) as exc:
            raise MalformedEncoding("invalid enum value") from exc
    if tag == _DC:
        _need(data, pos, 3)
        code, count = struct.unpack_from(">HB", data, pos)
        pos += 3
        cls = _CLASS_BY_CODE.get(code)
        if cls is None:
            raise MalformedEncoding(f"unknown type code {code}")
        if count != len(dataclasses.fields(cls)):
            raise MalformedEncoding(f"field count mismatch for {cls.__name__}")
        values = []
        for _ in range(count):
            item, pos = _decode_at(data, pos, depth + 1)
            values.append(item)
        try:
            return cls(*values), pos
        except (TypeError, ValueError) as exc:
            raise MalformedEncoding(f"invalid {cls.__name__}: {exc}") from exc
    raise MalformedEncoding(f"unknown tag {tag:#x}")


def decode(data: bytes, expected: type | None = None) -> Any:
    """Decode exactly one value; trailing bytes are an error."""
    value, pos = _decode_at(bytes(data), 0, 0)
    if pos != len(data):
        raise MalformedEncoding("trailing bytes")
    if expected is not None and not isinstance(value, expected):
        raise MalformedEncoding(f"expected {expected.__name__}, got {type(value).__name__}")
    return value


def digest_of(value: Any) -> str:
    """Hex SHA-256 of the canonical encoding; the identity used in traces."""
    return hashlib.sha256(encode(value)).hexdigest()


def children(value: Any) -> tuple[Any, ...]:
    """Immediate structural components of a value (empty for atoms)."""
    if isinstance(value, (tuple, list)):
        return tuple(value)
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return tuple(getattr(value, f.name) for f in dataclasses.fields(value))
    return ()


def bytes_spans(data: bytes) -> list[tuple[int, int]]:
    """Byte ranges holding raw ``bytes`` values inside an encoding.

    Flipping a byte inside one of these ranges keeps the encoding well formed,
    which is how single-byte tampering is aimed at cryptographic content rather
    than at framing.
    """
    spans: list[tuple[int, int]] = []

    def walk(pos: int) -> int:
        tag = data[pos]
        pos += 1
        if tag in (_BYTES, _STR):
            (n,) = struct.unpack_from(">I", data, pos)
            if tag == _BYTES and n:
                spans.append((pos + 4, pos + 4 + n))
            return pos + 4 + n
        if tag == _INT:
            return pos + 1 + data[pos]
        if tag == _NONE:
            return pos
        if tag == _BOOL:
            return pos + 1
        if tag == _ENUM:
            _, n = struct.unpack_from(">HI", data, pos)
            return pos + 6 + n
        if tag == _SEQ:
            (n,) = struct.unpack_from(">I", data, pos)
            pos += 4
            for _ in range(n):
                pos = walk(pos)
            return pos
        if tag == _DC:
            _, count = struct.unpack_from(">HB", data, pos)
            pos += 3
            for _ in range(count):
                pos = walk(pos)
            return pos
        raise MalformedEncoding(f"unknown tag {tag:#x}")

    decode(data)  # validate first
    walk(0)
    return spans
