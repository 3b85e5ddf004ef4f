"""Binary tensor container and checkpoint directories.

Tensor file layout (all integers little-endian uint64):

    rank | extent_0 ... extent_{rank-1} | dtype tag | row-major payload

Dtype tags: 1 = float32, 2 = float64, 3 = int64.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from .tensor import Tensor

DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_TAG_OF = {np.dtype(v).newbyteorder("=").type: k for k, v in DTYPE_TAGS.items()}

MANIFEST = "config.txt"


def tensor_to_bytes(arr) -> bytes:
    if isinstance(arr, Tensor):
        arr = arr.data
    arr = np.asarray(arr)
    tag = _TAG_OF.get(arr.dtype.type)
    if tag is None:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    header = struct.pack(f"<{arr.ndim + 2}Q", arr.ndim, *arr.shape, tag)
    return header + np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 16:
        raise ValueError("truncated tensor header")
    (rank,) = struct.unpack_from("<Q", buf, 0)
    if rank > 32:
        raise ValueError(f"implausible tensor rank {rank}")
    fields = struct.unpack_from(f"<{rank + 1}Q", buf, 8)
    shape, tag = fields[:rank], fields[rank]
    if tag not in DTYPE_TAGS:
        raise ValueError(f"unknown dtype tag {tag}")
    dtype = DTYPE_TAGS[tag]
    offset = 8 * (rank + 2)
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - offset != count * dtype.itemsize:
        raise ValueError(f"payload size {len(buf) - offset} does not match shape {shape}")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def write_manifest(path, values: Mapping[str, object]) -> None:
    lines = []
    for key, value in values.items():
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, str):
            text = '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
        else:
            text = repr(value)
        lines.append(f"{key} = {text}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> Dict[str, object]:
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def save_checkpoint(directory, state: Mapping[str, np.ndarray], manifest: Mapping[str, object]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in state.items():
        save_tensor(directory / f"{name}.bin", arr)
    write_manifest(directory / MANIFEST, manifest)
    return directory


def load_checkpoint(directory):
    directory = Path(directory)
    if not (directory / MANIFEST).exists():
        raise FileNotFoundError(f"no {MANIFEST} in checkpoint directory {directory}")
    manifest = read_manifest(directory / MANIFEST)
    state = {}
    for entry in sorted(os.listdir(directory)):
        if entry.endswith(".bin"):
            state[entry[: -len(".bin")]] = load_tensor(directory / entry)
    return state, manifest
