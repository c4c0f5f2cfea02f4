"""Writer for the token interchange format consumed by the grounding stack.

Byte layout (little-endian): magic b"MGSV", version u16 (=1), dtype u16
(0 = float32), rows u32, cols u32, duration f32, then rows*cols float32
row-major. Written independently here; the grounding package's reader is the
validation authority for emitted files.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"MGSV"
FORMAT_VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sHHIIf")

VIDEO_WIDTH = 512
MUSIC_WIDTH = 768


class ExtractError(Exception):
    """Extraction input or output is unusable."""


def write_tokens(path, tokens: np.ndarray, duration: float) -> None:
    """Atomically write a token file (temp file + rename)."""
    tokens = np.ascontiguousarray(tokens, dtype=np.float32)
    if tokens.ndim != 2 or tokens.shape[1] not in (VIDEO_WIDTH, MUSIC_WIDTH):
        raise ExtractError(f"bad token matrix shape {tokens.shape}")
    if duration <= 0:
        raise ExtractError(f"duration must be positive, got {duration}")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_F32,
                          tokens.shape[0], tokens.shape[1], duration)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(tokens.astype("<f4", copy=False).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
