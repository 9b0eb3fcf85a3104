"""Binary parameter checkpoints.

Layout (all integers little-endian u32, data little-endian f32)::

    "LEXA" | version | n_params
    n_params x record(name, tensor)            # parameter values
    n_params x record(name, m) record(name, v) + step_count   # Adam moments
    meta_len | UTF-8 JSON metadata

where ``record = name_len | name | rank | extents... | raw data``.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO, Sequence

import numpy as np

from .nn import Parameter

MAGIC = b"LEXA"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_record(f: BinaryIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_u32(f: BinaryIO) -> int:
    buf = f.read(4)
    if len(buf) != 4:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack("<I", buf)[0]


def _read_record(f: BinaryIO) -> tuple[str, np.ndarray]:
    name = f.read(_read_u32(f)).decode("utf-8")
    rank = _read_u32(f)
    shape = tuple(_read_u32(f) for _ in range(rank))
    n = int(np.prod(shape)) if shape else 1
    buf = f.read(4 * n)
    if len(buf) != 4 * n:
        raise CheckpointError(f"truncated data for {name!r}")
    return name, np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)


def save_parameters(path, params: Sequence[Parameter], meta: dict | None = None) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(params)))
        for p in params:
            _write_record(f, p.name, p.data)
        for p in params:
            _write_record(f, p.name, p.adam_m)
            _write_record(f, p.name, p.adam_v)
            f.write(struct.pack("<I", p.step_count))
        blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)


def read_checkpoint(path) -> tuple[dict[str, dict], dict]:
    """Return ``({name: {data, m, v, step}}, meta)``."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        version = _read_u32(f)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        n = _read_u32(f)
        entries: dict[str, dict] = {}
        order = []
        for _ in range(n):
            name, data = _read_record(f)
            entries[name] = {"data": data}
            order.append(name)
        for name in order:
            _, m = _read_record(f)
            _, v = _read_record(f)
            entries[name].update(m=m, v=v, step=_read_u32(f))
        meta = json.loads(f.read(_read_u32(f)).decode("utf-8"))
    return entries, meta


def load_parameters(path, params: Sequence[Parameter]) -> dict:
    """Restore values and Adam state in place; returns the metadata."""
    entries, meta = read_checkpoint(path)
    for p in params:
        if p.name not in entries:
            raise CheckpointError(f"parameter {p.name!r} missing from {path}")
        e = entries[p.name]
        if e["data"].shape != p.shape:
            raise CheckpointError(
                f"{p.name}: checkpoint shape {list(e['data'].shape)} != {list(p.shape)}")
        p.data[...] = e["data"]
        p.adam_m[...] = e["m"]
        p.adam_v[...] = e["v"]
        p.step_count = e["step"]
    return meta
