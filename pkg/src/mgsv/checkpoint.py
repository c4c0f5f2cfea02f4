"""Versioned binary checkpoint container.

Layout (little-endian): magic b"MGCK", version u16, header-length u32, a
UTF-8 JSON header, then raw tensor payloads in header order. The header
carries the model/train configs, the D_max normalizer, step/epoch counters,
the dropout RNG state, and one (name, shape, dtype) index entry per tensor.
Tensors cover model parameters, the loss temperature, and optimizer moments,
so reload-and-continue reproduces an uninterrupted run bit-for-bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"MGCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")

_DTYPE_CODES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _dtype_code(arr: np.ndarray) -> str:
    for code, dt in _DTYPE_CODES.items():
        if arr.dtype == dt:
            return code
    raise FormatError(f"unsupported tensor dtype {arr.dtype}")


@dataclass
class Checkpoint:
    model_config: dict
    tensors: dict                      # name -> np.ndarray
    d_max: float | None = None
    step: int = 0
    epoch: int = 0
    rng_state: dict | None = None
    best_metric: float | None = None
    train_config: dict | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    names = list(ckpt.tensors)
    index = []
    payloads = []
    for name in names:
        arr = np.asarray(ckpt.tensors[name])
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # note: would promote 0-d to 1-d
        index.append({"name": name, "shape": list(arr.shape), "dtype": _dtype_code(arr)})
        payloads.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    header = {
        "model_config": ckpt.model_config,
        "d_max": ckpt.d_max,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "best_metric": ckpt.best_metric,
        "train_config": ckpt.train_config,
        "meta": ckpt.meta,
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for payload in payloads:
            fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"truncated checkpoint {path}")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r} in {path}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} in {path}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start: start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header in {path}: {exc}") from exc
    offset = start + header_len
    tensors = {}
    for entry in header["tensors"]:
        dt = _DTYPE_CODES[entry["dtype"]]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dt.itemsize
        if offset + nbytes > len(raw):
            raise FormatError(f"truncated tensor payload in {path}")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"trailing bytes in checkpoint {path}")
    return Checkpoint(
        model_config=header["model_config"],
        tensors=tensors,
        d_max=header.get("d_max"),
        step=int(header.get("step", 0)),
        epoch=int(header.get("epoch", 0)),
        rng_state=header.get("rng_state"),
        best_metric=header.get("best_metric"),
        train_config=header.get("train_config"),
        meta=header.get("meta", {}),
    )
