"""Checkpoint persistence: a flat, ordered list of named arrays.

Binary layout: an 8-byte magic, then one length-prefixed record per
array:

    u32 record_len  (bytes after this field)
    u16 name_len, name bytes (utf-8)
    u8 dtype code, u8 ndim, u32 * ndim shape
    raw C-order payload

A plain-text manifest (`<path>.manifest.txt`) lists name, shape and the
byte offset of each record. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MBCKPT1\n"

_DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.int64): 2,
    np.dtype(np.uint64): 3,
    np.dtype(np.uint8): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(RuntimeError):
    pass


def manifest_path(path):
    return Path(str(path) + ".manifest.txt")


def write_arrays(path, items):
    """Write ordered (name, ndarray) pairs; returns the manifest path."""
    path = Path(path)
    lines = []
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in items:
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                raise CheckpointError(f"array {name!r} has unsupported dtype {arr.dtype}")
            offset = fh.tell()
            name_b = name.encode()
            header = struct.pack("<H", len(name_b)) + name_b
            header += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
            header += struct.pack(f"<{arr.ndim}I", *arr.shape)
            payload = arr.tobytes()
            fh.write(struct.pack("<I", len(header) + len(payload)))
            fh.write(header)
            fh.write(payload)
            shape = "x".join(map(str, arr.shape)) if arr.ndim else "scalar"
            lines.append(f"{name} {shape} {offset}")
    mpath = manifest_path(path)
    mpath.write_text("\n".join(lines) + "\n")
    return mpath


def read_arrays(path):
    """Read a checkpoint back as an ordered name -> ndarray dict."""
    path = Path(path)
    out = {}
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        while True:
            rec = fh.read(4)
            if not rec:
                break
            (rec_len,) = struct.unpack("<I", rec)
            body = fh.read(rec_len)
            if len(body) != rec_len:
                raise CheckpointError(f"{path}: truncated record")
            (name_len,) = struct.unpack_from("<H", body, 0)
            pos = 2
            name = body[pos:pos + name_len].decode()
            pos += name_len
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            dtype = _CODE_DTYPES.get(code)
            if dtype is None:
                raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
            arr = np.frombuffer(body[pos:], dtype=dtype).reshape(shape).copy()
            out[name] = arr
    return out


def pack_text(text):
    return np.frombuffer(text.encode(), dtype=np.uint8).copy()


def unpack_text(arr):
    return arr.tobytes().decode()
