"""Flat binary checkpoint files.

Layout (all integers little-endian, documented byte-exactly in docs/formats.md):

    bytes 0..7    magic  b"MSYNCKP1"
    u32           format version (1)
    u32           length of the meta JSON blob
    bytes         meta JSON (utf-8): arbitrary run/config metadata
    u32           length of the manifest JSON blob
    bytes         manifest JSON: list of [name, shape, dtype_code, offset]
    bytes         raw little-endian row-major buffers, at the recorded
                  offsets relative to the start of this payload section

dtype codes: 1 = float32, 2 = float64.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MSYNCKP1"
VERSION = 1
_DTYPE_TO_CODE = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class CheckpointError(Exception):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: "dict | None" = None) -> None:
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    manifest = []
    offset = 0
    buffers = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        code = _DTYPE_TO_CODE.get(np.dtype(le.dtype.str))
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for '{name}'")
        manifest.append([name, list(arr.shape), code, offset])
        raw = le.tobytes()
        buffers.append(raw)
        offset += len(raw)
    manifest_blob = json.dumps(manifest).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(meta_blob)))
        f.write(meta_blob)
        f.write(struct.pack("<I", len(manifest_blob)))
        f.write(manifest_blob)
        for raw in buffers:
            f.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    (meta_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    meta = json.loads(blob[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (man_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    manifest = json.loads(blob[pos : pos + man_len].decode("utf-8"))
    pos += man_len
    arrays: dict[str, np.ndarray] = {}
    for name, shape, code, offset in manifest:
        dtype = _CODE_TO_DTYPE.get(code)
        if dtype is None:
            raise CheckpointError(f"unknown dtype code {code} for '{name}'")
        count = int(np.prod(shape)) if shape else 1
        start = pos + offset
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=start)
        arrays[name] = arr.reshape(shape).copy()
    return arrays, meta


def save_module(path, module, meta: "dict | None" = None, prefix: str = "") -> None:
    arrays = {prefix + n: p.data for n, p in module.named_parameters()}
    arrays.update({prefix + "buf." + n: b for n, b in module.named_buffers()})
    save_checkpoint(path, arrays, meta)


def load_module(path, module, prefix: str = "") -> dict:
    arrays, meta = load_checkpoint(path)
    restore_module(module, arrays, prefix)
    return meta


def restore_module(module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    for name, param in module.named_parameters():
        key = prefix + name
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing parameter '{key}'")
        if tuple(arrays[key].shape) != param.shape:
            raise CheckpointError(
                f"shape mismatch for '{key}': checkpoint {arrays[key].shape}, model {param.shape}"
            )
        param.assign(arrays[key])
    buf_map = {}
    for name, _ in module.named_buffers():
        key = prefix + "buf." + name
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing buffer '{key}'")
        buf_map[name] = arrays[key]
    _assign_buffers(module, buf_map, "")


def _assign_buffers(module, buf_map: dict[str, np.ndarray], prefix: str) -> None:
    for key in list(module._buffers):
        full = prefix + key
        if full in buf_map:
            module._buffers[key] = buf_map[full].astype(module._buffers[key].dtype)
    for key, child in module._children():
        _assign_buffers(child, buf_map, f"{prefix}{key}.")
