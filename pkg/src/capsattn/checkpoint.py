"""Binary tensor checkpoints.

Layout, all integers little-endian::

    b"CAPS"  | u32 version | u32 entry count
    per entry: u32 name length | UTF-8 name | u32 rank | rank x u64 dims
               | prod(dims) x f32 values (row-major)
"""

from __future__ import annotations

import os
import struct
from collections import OrderedDict
from itertools import product
from typing import Mapping

import numpy as np

from .nn import Module

MAGIC = b"CAPS"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, entries: Mapping[str, np.ndarray]) -> None:
    """Write ``entries`` in order; the file is replaced atomically."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a CAPS checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 12
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from None
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def model_state(model: Module, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
    """Flatten parameters to checkpoint entries, unrolling stacked ones."""
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, p in model.named_parameters():
        data = p.data
        k = p.split_axes
        if k == 0:
            state[prefix + name] = data
            continue
        for idx in product(*(range(n) for n in data.shape[:k])):
            state[prefix + name + "." + ".".join(map(str, idx))] = data[idx]
    return state


def load_model_state(model: Module, entries: Mapping[str, np.ndarray], prefix: str = "") -> None:
    """Copy checkpoint entries back into ``model``'s parameters in place."""
    missing = []
    for name, p in model.named_parameters():
        k = p.split_axes
        if k == 0:
            key = prefix + name
            if key not in entries:
                missing.append(key)
                continue
            _assign(p.data, (), entries[key], key)
            continue
        for idx in product(*(range(n) for n in p.data.shape[:k])):
            key = prefix + name + "." + ".".join(map(str, idx))
            if key not in entries:
                missing.append(key)
                continue
            _assign(p.data, idx, entries[key], key)
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} parameters, e.g. {missing[:3]}")


def _assign(target: np.ndarray, idx, value: np.ndarray, key: str) -> None:
    dest = target[idx] if idx else target
    if dest.shape != value.shape:
        raise CheckpointError(f"{key}: shape {value.shape} != parameter shape {dest.shape}")
    if idx:
        target[idx] = value
    else:
        target[...] = value
