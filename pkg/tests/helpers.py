"""Independent oracles and fixtures shared across the test suite.

Everything here is deliberately written without reusing the library's own
algorithms: union-find labeling, direct convolution, brute-force matching
and sampling, so each test checks two independent routes to the same
answer.
"""

from __future__ import annotations

import hashlib
import itertools
import struct

import numpy as np

import tubetrace as tt
from tubetrace.synth import SynthSpec, paint_tube, render_intensity


# ---------------------------------------------------------------------------
# Union-find component oracle
# ---------------------------------------------------------------------------

class DSU:
    def __init__(self):
        self.parent = {}

    def find(self, a):
        self.parent.setdefault(a, a)
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def uf_components(binary: np.ndarray, connectivity: int) -> dict:
    """Voxel -> component-root map via brute-force pairwise union-find."""
    coords = [tuple(c) for c in np.argwhere(binary)]
    dsu = DSU()
    for c in coords:
        dsu.find(c)
    face_connected = connectivity in (4, 6)
    for a, b in itertools.combinations(coords, 2):
        diff = [abs(a[i] - b[i]) for i in range(len(a))]
        if max(diff) > 1:
            continue
        if face_connected and sum(diff) != 1:
            continue
        dsu.union(a, b)
    return {c: dsu.find(c) for c in coords}


def same_partition(labels: np.ndarray, oracle: dict) -> bool:
    """Labeling equals the oracle partition up to renaming."""
    fwd, bwd = {}, {}
    for c, root in oracle.items():
        lab = labels[c]
        if lab == 0:
            return False
        if fwd.setdefault(root, lab) != lab:
            return False
        if bwd.setdefault(lab, root) != root:
            return False
    return int((labels > 0).sum()) == len(oracle)


# ---------------------------------------------------------------------------
# Direct-convolution blur oracle
# ---------------------------------------------------------------------------

def direct_blur(data: np.ndarray, sigma: float) -> np.ndarray:
    """Triple-loop separable Gaussian with half-sample reflection."""
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (xs / sigma) ** 2)
    taps /= taps.sum()

    def reflect(i, n):
        period = 2 * n
        m = i % period
        return period - 1 - m if m >= n else m

    out = data.astype(np.float64)
    for axis in range(3):
        src = out.copy()
        out = np.zeros_like(src)
        n = data.shape[axis]
        for idx in np.ndindex(data.shape):
            acc = 0.0
            for t in range(-radius, radius + 1):
                j = list(idx)
                j[axis] = reflect(idx[axis] + t, n)
                acc += taps[t + radius] * src[tuple(j)]
            out[idx] = acc
    return out


# ---------------------------------------------------------------------------
# Brute-force assignment / matching oracles
# ---------------------------------------------------------------------------

def brute_min_cost(cost: np.ndarray) -> float:
    """Optimal assignment total over min(R, C) pairs by enumeration."""
    rows, cols = cost.shape
    n = max(rows, cols)
    padded = np.zeros((n, n))
    padded[:rows, :cols] = cost
    best = np.inf
    for perm in itertools.permutations(range(n)):
        best = min(best, sum(padded[i, perm[i]] for i in range(n)))
    return float(best)


def brute_best_matching(acc: np.ndarray, tol: float = 1e-12):
    """Maximum-total-accuracy injective matching, lexicographically first.

    Returns (pairs dict row->col over real columns, total). Rows beyond the
    column count may stay unmatched (represented by padded columns).
    """
    rows, cols = acc.shape
    n = max(rows, cols)
    padded = np.zeros((n, n))
    padded[:rows, :cols] = acc
    best_total = -np.inf
    best_perm = None
    for perm in itertools.permutations(range(n)):
        total = sum(padded[i, perm[i]] for i in range(rows))
        if total > best_total + tol:
            best_total = total
            best_perm = perm
    pairs = {i: best_perm[i] for i in range(rows) if best_perm[i] < cols}
    return pairs, float(best_total)


def brute_fps(points: np.ndarray, k: int) -> list[tuple[int, int]]:
    """Step-by-step greedy farthest sampling with explicit scans."""
    pts = [tuple(int(v) for v in p) for p in points]
    cr = sum(p[0] for p in pts) / len(pts)
    cc = sum(p[1] for p in pts) / len(pts)
    first = min(pts, key=lambda p: ((p[0] - cr) ** 2 + (p[1] - cc) ** 2, p[0], p[1]))
    chosen = [first]
    while len(chosen) < min(k, len(pts)):
        best, best_d = None, -1
        for p in pts:
            d = min((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 for q in chosen)
            if d > best_d or (d == best_d and p < best):
                best, best_d = p, d
        chosen.append(best)
    return chosen


# ---------------------------------------------------------------------------
# Phantom builders
# ---------------------------------------------------------------------------

def labelled_volume(labels: np.ndarray, noise_seed: int = 0, noise_sigma: float = 4.0):
    spec = SynthSpec(
        shape=labels.shape, radius_range=(1.0, 1.0), noise_sigma=noise_sigma, rng_seed=noise_seed
    )
    img = render_intensity(labels, spec, np.random.default_rng(noise_seed))
    vol = tt.Volume3D(data=img)
    gt = tt.LabelVolume(labels=labels.astype(np.uint32))
    return vol, gt


def elbow_volume(noise_seed: int = 11):
    """One L-shaped tube (vertical arm turning into x); GT has 1 instance."""
    labels = np.zeros((64, 64, 64), np.int32)
    paint_tube(labels, (8, 16, 16), (40, 16, 16), 3.0, 1)
    paint_tube(labels, (40, 16, 16), (40, 16, 48), 3.0, 1)
    vol, gt = labelled_volume(labels, noise_seed)
    return vol, gt, tt.Seed((20, 16, 16))


def three_tube_volume(noise_seed: int = 7):
    """U-shaped tube plus straight tubes along x and y; GT has 3 instances."""
    labels = np.zeros((64, 64, 64), np.int32)
    paint_tube(labels, (10, 16, 16), (44, 16, 16), 3.0, 1)
    paint_tube(labels, (44, 16, 16), (44, 16, 44), 3.0, 1)
    paint_tube(labels, (44, 16, 44), (10, 16, 44), 3.0, 1)
    paint_tube(labels, (16, 44, 8), (16, 44, 56), 3.0, 2)
    paint_tube(labels, (48, 8, 52), (48, 56, 52), 3.0, 3)
    vol, gt = labelled_volume(labels, noise_seed)
    seeds = [tt.Seed((26, 16, 16)), tt.Seed((16, 44, 32)), tt.Seed((48, 32, 52))]
    return vol, gt, seeds


def y_tree_volume(noise_seed: int = 3):
    """Trunk along z splitting into two wide-angle arms; GT has 1 instance."""
    labels = np.zeros((64, 64, 64), np.int32)
    paint_tube(labels, (8, 32, 32), (28, 32, 32), 3.0, 1)
    paint_tube(labels, (28, 32, 32), (50, 32, 12), 3.0, 1)
    paint_tube(labels, (28, 32, 32), (50, 32, 52), 3.0, 1)
    vol, gt = labelled_volume(labels, noise_seed)
    return vol, gt, tt.Seed((14, 32, 32))


# ---------------------------------------------------------------------------
# Adversarial backend
# ---------------------------------------------------------------------------

class RandomBackend(tt.SegmenterBackend):
    """Seeded chaos: random rectangle masks with random confidences,
    deterministic per (image, prompt) within a session."""

    capabilities = frozenset({"segment", "auto"})

    def __init__(self, session_seed: int, p_empty: float = 0.35):
        self.session_seed = session_seed
        self.p_empty = p_empty

    def _rng(self, image, prompt):
        h = hashlib.blake2b(digest_size=8)
        h.update(struct.pack("<q", self.session_seed))
        h.update(np.ascontiguousarray(image.data).tobytes())
        h.update(struct.pack("<ii", *prompt.point))
        if prompt.box is not None:
            h.update(struct.pack("<iiii", *prompt.box))
        return np.random.default_rng(int.from_bytes(h.digest(), "little"))

    def segment(self, image, prompt):
        rng = self._rng(image, prompt)
        rows, cols = image.shape
        prob = float(rng.random())
        if rng.random() < self.p_empty:
            return tt.SegmentResult2D(mask=tt.Mask2D(bits=np.zeros(image.shape, bool)), probability=prob)
        r, c = prompt.point
        h = int(rng.integers(1, max(2, rows // 2)))
        w = int(rng.integers(1, max(2, cols // 2)))
        r0 = max(0, r - int(rng.integers(0, h + 1)))
        c0 = max(0, c - int(rng.integers(0, w + 1)))
        bits = np.zeros(image.shape, bool)
        bits[r0 : min(rows, r0 + h), c0 : min(cols, c0 + w)] = True
        return tt.SegmentResult2D(mask=tt.Mask2D(bits=bits), probability=prob)

    def auto_masks(self, image):
        return [self.segment(image, tt.Prompt(point=(0, 0)))]
