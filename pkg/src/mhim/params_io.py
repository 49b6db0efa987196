"""Parameter files and atomic output writes.

Parameter file layout (all integers little-endian)::

    b"MHIP"                 4 bytes magic
    version     u8          = 1
    reserved    u8, u16     = 0
    manifest_len u32        byte length of the manifest
    manifest    utf-8 JSON  {"hyper": {...}, "params": [{"name": str, "shape": [r, c]}, ...]}
    data        float64 LE  every parameter row-major, in manifest order, no padding

Nothing follows the data block.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"MHIP"
VERSION = 1
_HEAD = struct.Struct("<4sBBHI")


class ParamFileError(IOError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_params(params: dict[str, np.ndarray], hyper: dict | None = None) -> bytes:
    manifest = {
        "hyper": hyper or {},
        "params": [{"name": k, "shape": list(np.shape(v))} for k, v in params.items()],
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.values())
    return _HEAD.pack(MAGIC, VERSION, 0, 0, len(mbytes)) + mbytes + blob


def load_params_bytes(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < _HEAD.size:
        raise ParamFileError("parameter file truncated in header")
    magic, version, _, _, mlen = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise ParamFileError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ParamFileError(f"unsupported version {version}")
    off = _HEAD.size
    if len(data) < off + mlen:
        raise ParamFileError("parameter file truncated in manifest")
    manifest = json.loads(data[off:off + mlen].decode("utf-8"))
    off += mlen
    params = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(data):
            raise ParamFileError(f"parameter {entry['name']!r} truncated at byte {off}")
        params[entry["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=off) \
            .astype(np.float64).reshape(shape)
        off = end
    if off != len(data):
        raise ParamFileError(f"{len(data) - off} trailing bytes after parameter data")
    return params, manifest["hyper"]


def save_params(path, params: dict[str, np.ndarray], hyper: dict | None = None) -> None:
    atomic_write_bytes(path, dump_params(params, hyper))


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise ParamFileError(f"parameter file not found: {path}") from exc
    return load_params_bytes(data)
