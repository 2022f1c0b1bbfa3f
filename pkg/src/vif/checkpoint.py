"""Checkpoint files.

Layout (all integers little-endian)::

    magic   8 bytes  b"VIFCKPT1"
    version u32
    config  u32 byte length, then UTF-8 "key=value" lines
    records until EOF, each:
        name length u32, name bytes (UTF-8)
        rank u32, dims u32 * rank
        payload f64 little-endian, row-major
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

CKPT_MAGIC = b"VIFCKPT1"
CKPT_VERSION = 1
_U32 = struct.Struct("<I")


def encode_config(cfg: dict) -> bytes:
    lines = []
    for k in sorted(cfg):
        v = str(cfg[k])
        if "\n" in v or "=" in k or "\n" in k:
            raise FormatError(f"config entry {k!r} cannot be serialized", module="backbone")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def decode_config(raw: bytes) -> dict:
    out = {}
    for line in raw.decode("utf-8").splitlines():
        if not line:
            continue
        k, sep, v = line.partition("=")
        if not sep:
            raise FormatError(f"config line without '=': {line!r}", module="backbone")
        out[k] = v
    return out


def to_bytes(config: dict, params: dict) -> bytes:
    parts = [CKPT_MAGIC, _U32.pack(CKPT_VERSION)]
    blob = encode_config(config)
    parts += [_U32.pack(len(blob)), blob]
    for name in sorted(params):
        arr = params[name]
        arr = np.asarray(getattr(arr, "data", arr), dtype="<f8")
        nb = name.encode("utf-8")
        parts += [_U32.pack(len(nb)), nb, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes):
    """Returns (config dict, {name: float64 array})."""
    n = len(buf)
    if n < 12 or buf[:8] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0, module="backbone")
    (version,) = _U32.unpack_from(buf, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=8, module="backbone")
    off = 12

    def u32():
        nonlocal off
        if off + 4 > n:
            raise FormatError("truncated checkpoint", offset=off, module="backbone")
        (v,) = _U32.unpack_from(buf, off)
        off += 4
        return v

    clen = u32()
    if off + clen > n:
        raise FormatError("truncated config block", offset=off, module="backbone")
    config = decode_config(buf[off:off + clen])
    off += clen
    params = {}
    while off < n:
        start = off
        nlen = u32()
        if off + nlen > n:
            raise FormatError("truncated record name", offset=off, module="backbone")
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        rank = u32()
        dims = tuple(u32() for _ in range(rank))
        size = int(np.prod(dims, dtype=np.int64)) * 8
        if off + size > n:
            raise FormatError(f"truncated payload for {name!r}", offset=off, module="backbone")
        if name in params:
            raise FormatError(f"duplicate record {name!r}", offset=start, module="backbone")
        params[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=off).reshape(dims).astype(np.float64)
        off += size
    return config, params


def save(path, config: dict, params: dict):
    with open(path, "wb") as fh:
        fh.write(to_bytes(config, params))


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
