"""Binary tensor format, named-map containers, and text manifests.

Single tensor record:

    magic   4 bytes  b"PVTN"
    version u16 LE   (currently 1)
    dtype   u8       1 = float32, 2 = float64
    rank    u8
    dims    rank x u64 LE
    data    raw little-endian scalars, C order

A named map file (extension .pvm) is b"PVTM", u16 version, u32 entry count,
then per entry a u16 name length, the UTF-8 name, and a tensor record.
Round-trips are bit-exact, which checkpoint/resume determinism depends on.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

_TENSOR_MAGIC = b"PVTN"
_MAP_MAGIC = b"PVTM"
_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype(np.float32), 2: np.dtype(np.float64)}


def write_tensor(f, arr):
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise DataError(f"unsupported dtype {arr.dtype}")
    f.write(_TENSOR_MAGIC)
    f.write(struct.pack("<HBB", _VERSION, code, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(f):
    magic = f.read(4)
    if magic != _TENSOR_MAGIC:
        raise DataError(f"bad tensor magic {magic!r}")
    version, code, rank = struct.unpack("<HBB", f.read(4))
    if version != _VERSION:
        raise DataError(f"unsupported tensor format version {version}")
    dtype = _CODE_DTYPES.get(code)
    if dtype is None:
        raise DataError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    raw = f.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise DataError("truncated tensor record")
    arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype)
    return arr.reshape(dims)


def save_tensor(path, arr):
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path):
    with open(path, "rb") as f:
        return read_tensor(f)


def save_named(path, named):
    """Write an ordered {name: ndarray} map as one .pvm file."""
    with open(path, "wb") as f:
        f.write(_MAP_MAGIC)
        f.write(struct.pack("<HI", _VERSION, len(named)))
        for name, arr in named.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            write_tensor(f, arr)


def load_named(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAP_MAGIC:
            raise DataError(f"bad map magic {magic!r} in {path}")
        version, count = struct.unpack("<HI", f.read(6))
        if version != _VERSION:
            raise DataError(f"unsupported map format version {version}")
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            out[name] = read_tensor(f)
        return out


def write_manifest(path, fields):
    """Plain key=value text, one pair per line, written in insertion order."""
    lines = [f"{k}={v}" for k, v in fields.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path):
    fields = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"malformed manifest line: {line!r}")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    return fields
