"""Benchmark the numba kernels against the pure-numpy fallback.

Run twice to compare paths:

    python benchmarks/bench_kernels.py
    TUBETRACE_NO_NUMBA=1 python benchmarks/bench_kernels.py

Each hot kernel runs on the same seeded inputs, so the voxel outputs can
be diffed across paths as well (they are bit-identical).
"""

import hashlib
import time

import numpy as np

import tubetrace as tt
from tubetrace import _kernels
from tubetrace.synth import SynthSpec, generate


def run_timed(label, fn, repeats=3):
    fn()  # warm-up (includes jit compilation on the numba path)
    best = np.inf
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    print(f"{label:<38} {best * 1e3:9.1f} ms")
    return out


def main():
    print(f"kernel path: {_kernels.active_path()}")
    rng = np.random.default_rng(0)

    vol = tt.Volume3D(data=rng.integers(0, 256, size=(128, 256, 256)).astype(np.uint8))
    blurred = run_timed("gaussian_blur3d 128x256x256 sigma=1", lambda: tt.gaussian_blur3d(vol, 1.0))
    print(f"  blur checksum: {hashlib.md5(blurred.data.tobytes()).hexdigest()}")

    binary = rng.random((128, 256, 256)) < 0.12
    labels = run_timed(
        "connected_components 26-conn", lambda: tt.connected_components(binary, 26)[0]
    )
    print(f"  labels checksum: {hashlib.md5(labels.tobytes()).hexdigest()}")

    spec = SynthSpec(
        shape=(160, 160, 160), n_trees=4, branch_prob=0.5, radius_range=(2, 6), rng_seed=1
    )
    _, gt, _ = run_timed("synth generate 160^3, 4 trees", lambda: generate(spec))
    print(f"  gt checksum: {hashlib.md5(gt.labels.tobytes()).hexdigest()}")

    vol2, gt2, seeds = generate(
        SynthSpec(shape=(128, 128, 128), n_trees=1, branch_prob=0.45,
                  segment_len_range=(20, 32), radius_range=(2, 6), rng_seed=2,
                  bifurcation_range=(1, 3))
    )
    run_timed(
        "oracle traversal 128^3 tree",
        lambda: tt.run(vol2, seeds, tt.OracleSegmenter(gt2), tt.EngineConfig(min_mask_px=1)),
        repeats=2,
    )


if __name__ == "__main__":
    main()
