"""Flat binary weight container.

Layout, all little-endian:

    magic   4 bytes  b"TVWT"
    version u32      currently 1
    config  u32 length + UTF-8 JSON (network config echo, sorted keys)
    count   u32      number of arrays
    per array:
        name   u16 length + UTF-8
        ndim   u8
        dims   u32 * ndim
        data   float64 * prod(dims)

Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"TVWT"
VERSION = 1


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], config: dict) -> None:
    """Write named float64 arrays plus a config echo, atomically."""
    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<I", VERSION)
    cfg_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    payload += struct.pack("<I", len(cfg_bytes))
    payload += cfg_bytes
    payload += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        name_b = name.encode("utf-8")
        payload += struct.pack("<H", len(name_b))
        payload += name_b
        payload += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            payload += struct.pack("<I", d)
        payload += arr.tobytes()
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (arrays, config); validates magic, version, and sizes."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path} is not a weight container (bad magic {blob[:4]!r})")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    config = json.loads(blob[off:off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        arrays[name] = arr.astype(np.float64)
    if off != len(blob):
        raise ValueError(f"{path} has {len(blob) - off} trailing bytes")
    return arrays, config
