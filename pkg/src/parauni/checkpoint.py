"""Versioned binary checkpoints.

Layout (all integers little-endian):
    magic "PUNI" | u32 version
    u32 config length | config text (utf-8)
    u32 meta length   | meta json (seed, stage, epoch, reward index,
                        controller scalars)
    u32 tensor count  | records of (u16 name len, name, u8 ndim,
                        ndim x u32 dims, f32 data)
    u32 mask count    | records of (u32 layer, u32 rows, u32 cols, f32 data)

Save is atomic (tmp file + rename); load never installs partial state: it
parses the whole file into a CheckpointData before anything is applied.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"PUNI"
VERSION = 1


@dataclass
class CheckpointData:
    config_text: str
    meta: dict
    tensors: dict[str, np.ndarray]
    ldam_masks: dict[int, np.ndarray] = field(default_factory=dict)


def _read_exact(fh, count: int, what: str) -> bytes:
    offset = fh.tell()
    blob = fh.read(count)
    if len(blob) != count:
        raise CheckpointFormatError(
            f"truncated checkpoint while reading {what}", offset
        )
    return blob


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(arr.tobytes())


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "tensor name length"))
    name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1, f"rank of {name}"))
    dims = [
        struct.unpack("<I", _read_exact(fh, 4, f"dims of {name}"))[0]
        for _ in range(ndim)
    ]
    count = int(np.prod(dims)) if dims else 1
    blob = _read_exact(fh, 4 * count, f"data of {name}")
    arr = np.frombuffer(blob, dtype="<f4").astype(np.float32).reshape(dims)
    return name, arr


def save_checkpoint(path, data: CheckpointData) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_suffix(target.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        config_blob = data.config_text.encode("utf-8")
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)
        meta_blob = json.dumps(data.meta, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(data.tensors)))
        for name in sorted(data.tensors):
            _write_tensor(fh, name, data.tensors[name])
        fh.write(struct.pack("<I", len(data.ldam_masks)))
        for layer in sorted(data.ldam_masks):
            mask = np.ascontiguousarray(data.ldam_masks[layer], dtype=np.float32)
            fh.write(struct.pack("<III", layer, mask.shape[0], mask.shape[1]))
            fh.write(mask.tobytes())
    os.replace(tmp, target)


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointFormatError(
                f"unsupported checkpoint version {version}, expected {VERSION}", 4
            )
        (config_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config_text = _read_exact(fh, config_len, "config text").decode("utf-8")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "meta length"))
        meta = json.loads(_read_exact(fh, meta_len, "meta json").decode("utf-8"))
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors = {}
        for _ in range(n_tensors):
            name, arr = _read_tensor(fh)
            tensors[name] = arr
        (n_masks,) = struct.unpack("<I", _read_exact(fh, 4, "mask count"))
        masks = {}
        for _ in range(n_masks):
            layer, rows, cols = struct.unpack(
                "<III", _read_exact(fh, 12, "mask header")
            )
            blob = _read_exact(fh, 4 * rows * cols, f"mask data for layer {layer}")
            masks[layer] = (
                np.frombuffer(blob, dtype="<f4").astype(np.float32).reshape(rows, cols)
            )
        trailing = fh.read(1)
        if trailing:
            raise CheckpointFormatError("unexpected trailing bytes", fh.tell() - 1)
    return CheckpointData(
        config_text=config_text, meta=meta, tensors=tensors, ldam_masks=masks
    )


def encode_float(value: float) -> "float | str":
    """JSON-safe float encoding; infinities become strings."""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def decode_float(value) -> float:
    if isinstance(value, str):
        return float(value)
    return float(value)
