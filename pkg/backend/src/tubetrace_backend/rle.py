"""Run-length codec: row-major alternating runs, background first."""

import numpy as np


def encode(bits: np.ndarray) -> list[int]:
    flat = np.asarray(bits, dtype=bool).ravel()
    if flat.size == 0:
        return [0]
    edges = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], edges, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def decode(runs: list[int], rows: int, cols: int) -> np.ndarray:
    if any(not isinstance(r, int) or r < 0 for r in runs):
        raise ValueError("run lengths must be non-negative integers")
    if sum(runs) != rows * cols:
        raise ValueError(f"run lengths sum to {sum(runs)}, expected {rows * cols}")
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    return np.repeat(values, runs).reshape(rows, cols)
