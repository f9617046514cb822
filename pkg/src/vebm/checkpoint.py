"""Binary checkpoints: a JSON header followed by raw float32 tensors.

Layout (little-endian)::

    b"VEBM"  u32 version  u32 header_len  header (UTF-8 JSON)
    then per tensor, in header order:
    u16 name_len  name  u8 ndim  u32 × ndim shape  f32 × prod(shape)

The header holds the run config and the trainer state with every float32
array replaced by a ``{"__tensor__": name}`` reference. Other arrays (the
float64 histogram, for instance) are stored inline so they stay exact.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VEBM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _split(obj, path, blobs):
    if isinstance(obj, dict):
        # sorted walk so identical states serialize to identical bytes
        return {str(k): _split(obj[k], f"{path}/{k}" if path else str(k), blobs) for k in sorted(obj, key=str)}
    if isinstance(obj, (list, tuple)):
        return [_split(v, f"{path}/{i}", blobs) for i, v in enumerate(obj)]
    if isinstance(obj, np.ndarray):
        if obj.dtype == np.float32:
            blobs.append((path, obj))
            return {"__tensor__": path}
        return {"__array__": obj.ravel().tolist(), "dtype": obj.dtype.str, "shape": list(obj.shape)}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _join(obj, tensors):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            return tensors[obj["__tensor__"]]
        if "__array__" in obj:
            return np.asarray(obj["__array__"], dtype=np.dtype(obj["dtype"])).reshape(obj["shape"])
        return {k: _join(v, tensors) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_join(v, tensors) for v in obj]
    return obj


def dumps(config, state):
    blobs = []
    header = {"config": config, "state": _split(state, "", blobs), "tensors": [name for name, _ in blobs]}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes]
    for name, arr in blobs:
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def loads(raw):
    """Inverse of :func:`dumps`; returns ``(config, state)``."""
    mv = memoryview(raw)
    if len(raw) < 12 or bytes(mv[:4]) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12 + hlen
    if pos > len(raw):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(bytes(mv[12:pos]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    tensors = {}
    for expected in header["tensors"]:
        try:
            (nlen,) = struct.unpack_from("<H", raw, pos)
            name = bytes(mv[pos + 2 : pos + 2 + nlen]).decode("utf-8")
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
            pos += 1 + 4 * ndim
        except struct.error:
            raise CheckpointError("truncated checkpoint tensor header") from None
        if name != expected:
            raise CheckpointError(f"tensor {name!r} found where {expected!r} was expected")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise CheckpointError(f"truncated data for tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after the last tensor")
    return header["config"], _join(header["state"], tensors)


def save_checkpoint(path, config, state):
    """Write atomically (temp file then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(config, state))
    os.replace(tmp, path)


def load_checkpoint(path):
    return loads(Path(path).read_bytes())
