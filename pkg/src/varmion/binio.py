"""Versioned little-endian container used by every binary artifact.

Layout::

    magic (8 bytes) | version u32 | header length u64 | header JSON (utf-8)
    | array payloads in header order, raw little-endian

The header is serialized with sorted keys and no whitespace so that equal
content always produces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, MissingFile

_PREFIX = struct.Struct("<8sIQ")
_DTYPES = {"f8": "<f8", "i8": "<i8", "i4": "<i4", "u1": "|u1", "b1": "|b1"}


def _canonical(arr: np.ndarray) -> tuple[str, np.ndarray]:
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        return "b1", arr.astype("|b1")
    if np.issubdtype(arr.dtype, np.floating):
        return "f8", arr.astype("<f8")
    if np.issubdtype(arr.dtype, np.integer):
        return "i8", arr.astype("<i8")
    raise TypeError(f"unsupported dtype {arr.dtype}")


def dumps(magic: bytes, version: int, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    specs = []
    payload = []
    for name, arr in arrays.items():
        code, arr = _canonical(arr)
        specs.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        payload.append(np.ascontiguousarray(arr).tobytes())
    full = dict(header)
    full["__arrays__"] = specs
    blob = json.dumps(full, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(magic, version, len(blob)) + blob + b"".join(payload)


def loads(data: bytes, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _PREFIX.size:
        raise FormatError("file too short")
    got_magic, got_version, hlen = _PREFIX.unpack_from(data, 0)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise FormatError(f"unsupported format version {got_version} (expected {version})")
    start = _PREFIX.size
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from exc
    offset = start + hlen
    arrays = {}
    for spec in header.pop("__arrays__", []):
        dt = np.dtype(_DTYPES[spec["dtype"]])
        shape = tuple(spec["shape"])
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise FormatError(f"truncated payload for array {spec['name']!r}")
        arr = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=offset)
        arrays[spec["name"]] = arr.reshape(shape).astype(dt.newbyteorder("="))
        offset += nbytes
    if offset != len(data):
        raise FormatError("trailing bytes after payload")
    return header, arrays


def write(path, magic, version, header, arrays) -> bytes:
    data = dumps(magic, version, header, arrays)
    Path(path).write_bytes(data)
    return data


def read(path, magic, version):
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    return loads(path.read_bytes(), magic, version)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
