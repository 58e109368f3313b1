"""Versioned binary container of named float64 arrays plus a JSON config echo.

Byte layout (all integers little-endian)::

    magic        8 bytes   b"COECKPT\\x00"
    version      u32       currently 1
    config_len   u32
    config       config_len bytes of UTF-8 JSON
    n_records    u32
    n_records times:
        name_len u16, name (UTF-8)
        ndim     u8,  dims u32 * ndim
        data     prod(dims) float64, row-major

Readers reject any other magic or version.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"COECKPT\x00"
VERSION = 1


class CheckpointError(Exception):
    pass


def dumps(arrays: dict[str, np.ndarray], config: dict) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def loads(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, cfg_len = struct.unpack_from("<II", raw, 8)
        if version != VERSION:
            raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
        off = 16
        config = json.loads(raw[off : off + cfg_len].decode("utf-8"))
        off += cfg_len
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        arrays = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, off)
            name = raw[off + 2 : off + 2 + n].decode("utf-8")
            off += 2 + n
            (ndim,) = struct.unpack_from("<B", raw, off)
            shape = struct.unpack_from(f"<{ndim}I", raw, off + 1)
            off += 1 + 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return arrays, config


def save(path, arrays: dict[str, np.ndarray], config: dict) -> None:
    Path(path).write_bytes(dumps(arrays, config))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(raw)


def digest(arrays: dict[str, np.ndarray]) -> str:
    """Content hash of a parameter dict, for tamper checks."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    return h.hexdigest()
