"""Run-length codec for binary masks on the backend wire protocol.

Row-major, alternating run lengths starting with a background run (which
may be 0); runs must sum to rows*cols.
"""

from __future__ import annotations

import numpy as np


class RLEError(ValueError):
    pass


def encode(bits: np.ndarray) -> list[int]:
    flat = np.asarray(bits, dtype=bool).ravel()
    if flat.size == 0:
        return [0]
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def decode(runs: list[int], rows: int, cols: int) -> np.ndarray:
    if any((not isinstance(r, int)) or r < 0 for r in runs):
        raise RLEError(f"run lengths must be non-negative integers, got {runs!r}")
    total = sum(runs)
    if total != rows * cols:
        raise RLEError(f"run lengths sum to {total}, expected {rows * cols}")
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, runs)
    return flat.reshape(rows, cols)
