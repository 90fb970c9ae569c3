"""Minimal reader for the VOL container (JSON header + raw payload)."""

import json
import math
from pathlib import Path

import numpy as np

_DTYPES = {"u8": np.uint8, "u16": np.uint16, "u32": np.uint32}


def load(path: str | Path) -> np.ndarray:
    path = Path(path)
    header = json.loads(path.read_text())
    shape = tuple(int(n) for n in header["shape"])
    dtype = np.dtype(_DTYPES[header["dtype"]]).newbyteorder("<")
    raw = (path.parent / header["data"]).read_bytes()
    expected = math.prod(shape) * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(f"payload size mismatch: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
