"""Checkpoint container.

Byte layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"SDSNCKPT"
    8       4     uint32 format version (1)
    12      8     uint64 header length L
    20      L     UTF-8 JSON header
    20+L    ...   tensor data, float32 little-endian, concatenated

The header is ``{"config": <ModelConfig dict>, "meta": {...},
"tensors": [{"name", "shape", "offset", "count"}, ...]}`` where ``offset`` is
in bytes from the start of the data section. Every entry of the model's
``state_dict`` is stored (parameters and normalization statistics); integer
buffers such as ``num_batches_tracked`` are stored as float32 and cast back
on load.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .model import SDSNet

MAGIC = b"SDSNCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_checkpoint(model: SDSNet, path, meta=None):
    state = model.state_dict()
    tensors, chunks, offset = [], [], 0
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        arr = np.ascontiguousarray(arr)
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": model.config.to_dict(), "meta": meta or {}, "tensors": tensors},
                        sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    return path


def read_checkpoint(path):
    """(config, meta, {name: float32 ndarray})."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    start = _PREFIX.size
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    body = memoryview(data)[start + hlen:]
    arrays = {}
    for entry in header["tensors"]:
        end = entry["offset"] + 4 * entry["count"]
        if end > len(body):
            raise ValueError(f"{path}: tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(body[entry["offset"]:end], dtype="<f4").reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return ModelConfig.from_dict(header["config"]), header.get("meta", {}), arrays


def load_checkpoint(path, dtype=torch.float32):
    config, meta, arrays = read_checkpoint(path)
    model = SDSNet(config)
    state = model.state_dict()
    missing = set(state) - set(arrays)
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)[:5]}")
    new_state = {}
    for name, ref in state.items():
        new_state[name] = torch.from_numpy(arrays[name]).to(ref.dtype)
    model.load_state_dict(new_state)
    if dtype != torch.float32:
        model = model.to(dtype)
    return model, meta
