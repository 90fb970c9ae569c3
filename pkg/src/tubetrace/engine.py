"""Tri-plane traversal engine.

A traversal grows one connected prediction from a seed: pick the plane
family whose 2D segmentation at the seed is most confident and most
compact (smallest physical area), propagate that mask slice-to-slice in
both directions, then sample candidate turning points on the orthogonal
planes at the positions where tracking stopped and recurse until the seed
list drains. Multi-seed and chunked runs fuse overlapping voxel sets into
instances afterwards.
"""

from __future__ import annotations

import json
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from math import ceil
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .segmenter import Prompt, SegmenterBackend, SegmentResult2D, segment
from .volume import (
    LabelVolume,
    Mask2D,
    PlaneAxis,
    Volume3D,
    extract_plane,
    inplane_coords,
    lift_coords,
)

EventHook = Optional[Callable[[dict], None]]


@dataclass(frozen=True)
class Seed:
    """A (z, y, x) voxel position a traversal starts or resumes from."""

    pos: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "pos", tuple(int(v) for v in self.pos))


@dataclass
class EngineConfig:
    tau: float = 0.8
    gamma: float = 1.2
    k_turning: int = 3
    max_steps: int = 4096
    traversal_order: str = "fifo"
    chunk_shape: Optional[tuple[int, int, int]] = None
    min_mask_px: int = 10
    # Debug switches for ablation runs; not part of the standard pipeline.
    restrict_axes: Optional[tuple[PlaneAxis, ...]] = None
    turning_points: bool = True
    dense_reselect: bool = False

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must be in [0, 1]")
        if self.gamma < 1.0:
            raise ValueError("gamma must be >= 1")
        if self.k_turning < 1:
            raise ValueError("k_turning must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.traversal_order not in ("fifo", "lifo"):
            raise ValueError("traversal_order must be 'fifo' or 'lifo'")
        if self.chunk_shape is not None:
            self.chunk_shape = tuple(int(c) for c in self.chunk_shape)
            if len(self.chunk_shape) != 3 or any(c < 2 for c in self.chunk_shape):
                raise ValueError("chunk_shape must be three extents >= 2")

    @classmethod
    def from_dict(cls, data: dict) -> "EngineConfig":
        known = {
            "tau", "gamma", "k_turning", "max_steps",
            "traversal_order", "chunk_shape", "min_mask_px",
        }
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown engine config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if kwargs.get("chunk_shape") is not None:
            kwargs["chunk_shape"] = tuple(kwargs["chunk_shape"])
        return cls(**kwargs)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "EngineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TrackStop:
    """Where and why one tracking direction ended.

    reason is "gate" (confidence/empty mask), "max_steps", "redirect"
    (dense re-selection chose another axis), or "bounds" (volume edge).
    pos is the last accepted prompt position lifted into the volume.
    """

    pos: tuple[int, int, int]
    direction: int
    reason: str


@dataclass
class TrackedSegment:
    """3D voxel set from tracking one branch along one axis."""

    axis: PlaneAxis
    slice_masks: dict[int, np.ndarray]
    stops: list[TrackStop] = field(default_factory=list)

    @property
    def terminal_prompts(self) -> list[TrackStop]:
        """Stops strictly inside the volume (turning-point candidates)."""
        return [s for s in self.stops if s.reason != "bounds"]

    @property
    def boundary_stops(self) -> list[TrackStop]:
        return [s for s in self.stops if s.reason == "bounds"]

    def voxel_count(self) -> int:
        return int(sum(bits.sum() for bits in self.slice_masks.values()))

    def voxels(self) -> set[tuple[int, int, int]]:
        out: set[tuple[int, int, int]] = set()
        for index, bits in self.slice_masks.items():
            for r, c in np.argwhere(bits):
                out.add(lift_coords((int(r), int(c)), self.axis, index))
        return out

    def embed(self, shape: tuple[int, int, int]) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        for index, bits in self.slice_masks.items():
            _paint_slice(out, self.axis, index, bits)
        return out


def _paint_slice(target: np.ndarray, axis: PlaneAxis, index: int, bits: np.ndarray) -> None:
    if axis == PlaneAxis.Z:
        target[index, :, :] |= bits
    elif axis == PlaneAxis.Y:
        target[:, index, :] |= bits
    else:
        target[:, :, index] |= bits


class VisitedSet:
    """Per-axis voxel maps: (seed, axis) is visited once the seed voxel was
    segmented by a track running along that axis."""

    def __init__(self, shape: tuple[int, int, int]):
        self._maps = {axis: np.zeros(shape, dtype=bool) for axis in PlaneAxis}

    def is_visited(self, pos: tuple[int, int, int], axis: PlaneAxis) -> bool:
        return bool(self._maps[axis][pos])

    def mark(self, seg: TrackedSegment) -> None:
        target = self._maps[seg.axis]
        for index, bits in seg.slice_masks.items():
            _paint_slice(target, seg.axis, index, bits)

    def map_for(self, axis: PlaneAxis) -> np.ndarray:
        return self._maps[axis]


# ---------------------------------------------------------------------------
# Prompt construction and plane selection
# ---------------------------------------------------------------------------

def make_prompt(mask: Mask2D, gamma: float) -> Prompt:
    """Centroid point plus the bounding box scaled about its center by gamma.

    If the centroid misses the mask (non-convex blob) the point snaps to
    the nearest mask pixel, ties to smallest row then column. The box is
    clipped to the image.
    """
    if mask.is_empty():
        raise ValueError("cannot build a prompt from an empty mask")
    rows, cols = np.nonzero(mask.bits)
    cr, cc = float(rows.mean()), float(cols.mean())
    pr, pc = int(round(cr)), int(round(cc))
    nr, nc = mask.shape
    if not (0 <= pr < nr and 0 <= pc < nc and mask.bits[pr, pc]):
        d2 = (rows - cr) ** 2 + (cols - cc) ** 2
        best = np.lexsort((cols, rows, d2))[0]
        pr, pc = int(rows[best]), int(cols[best])
    r0, c0 = int(rows.min()), int(cols.min())
    h, w = int(rows.max()) - r0 + 1, int(cols.max()) - c0 + 1
    gh, gw = int(round(gamma * h)), int(round(gamma * w))
    r0g, c0g = r0 - (gh - h) // 2, c0 - (gw - w) // 2
    ra, ca = max(0, r0g), max(0, c0g)
    rb, cb = min(nr, r0g + gh), min(nc, c0g + gw)
    return Prompt(point=(pr, pc), box=(ra, ca, rb - ra, cb - ca))


def _plane_axes(cfg: EngineConfig) -> tuple[PlaneAxis, ...]:
    if cfg.restrict_axes is None:
        return (PlaneAxis.Z, PlaneAxis.Y, PlaneAxis.X)
    return tuple(sorted(cfg.restrict_axes))


def plane_select(
    vol: Volume3D, seed: Seed, backend: SegmenterBackend, cfg: EngineConfig
) -> Optional[tuple[PlaneAxis, SegmentResult2D]]:
    """Segment the planes through the seed and pick the qualifying axis
    with the smallest physical mask area (ties: z before y before x).

    Returns None when no plane clears the confidence gate.
    """
    best: Optional[tuple[float, PlaneAxis, SegmentResult2D]] = None
    for axis in _plane_axes(cfg):
        image = extract_plane(vol, axis, seed.pos[axis])
        prompt = Prompt(point=inplane_coords(seed.pos, axis))
        res = segment(backend, image, prompt, cfg.min_mask_px)
        if res.probability > cfg.tau and not res.mask.is_empty():
            area = res.mask.area_px * image.pixel_size[0] * image.pixel_size[1]
            if best is None or area < best[0]:
                best = (area, axis, res)
    if best is None:
        return None
    return best[1], best[2]


# ---------------------------------------------------------------------------
# Mask tracking along one axis
# ---------------------------------------------------------------------------

def track(
    vol: Volume3D,
    seed: Seed,
    axis: PlaneAxis,
    initial: SegmentResult2D,
    backend: SegmenterBackend,
    cfg: EngineConfig,
) -> TrackedSegment:
    """Propagate the initial mask slice-by-slice in both directions.

    Each step prompts the backend on the adjacent slice with the previous
    mask's centroid point and scaled bounding box; steps are accepted
    while confidence stays above tau and the mask is non-empty, up to
    max_steps per direction or the volume edge.
    """
    extent = vol.shape[axis]
    start = seed.pos[axis]
    slice_masks: dict[int, np.ndarray] = {start: initial.mask.bits}
    stops: list[TrackStop] = []
    for direction in (1, -1):
        prev = initial.mask
        idx = start
        steps = 0
        while True:
            prompt = make_prompt(prev, cfg.gamma)
            here = lift_coords(prompt.point, axis, idx)
            nxt = idx + direction
            if not 0 <= nxt < extent:
                stops.append(TrackStop(pos=here, direction=direction, reason="bounds"))
                break
            if steps >= cfg.max_steps:
                stops.append(TrackStop(pos=here, direction=direction, reason="max_steps"))
                break
            res = segment(backend, extract_plane(vol, axis, nxt), prompt, cfg.min_mask_px)
            if res.probability <= cfg.tau or res.mask.is_empty():
                stops.append(TrackStop(pos=here, direction=direction, reason="gate"))
                break
            idx = nxt
            steps += 1
            prev = res.mask
            slice_masks[idx] = res.mask.bits
            if cfg.dense_reselect:
                probe = Seed(lift_coords(make_prompt(prev, cfg.gamma).point, axis, idx))
                sel = plane_select(vol, probe, backend, cfg)
                if sel is not None and sel[0] != axis:
                    stops.append(TrackStop(pos=probe.pos, direction=direction, reason="redirect"))
                    break
    return TrackedSegment(axis=axis, slice_masks=slice_masks, stops=stops)


# ---------------------------------------------------------------------------
# Turning-point sampling
# ---------------------------------------------------------------------------

def fps(points: Sequence[tuple[int, int]] | np.ndarray, k: int) -> list[tuple[int, int]]:
    """Greedy farthest-point sampling over integer pixel coordinates.

    The first pick is the point nearest the centroid; every later pick
    maximizes its minimum distance to the chosen set. All ties resolve to
    the smallest row, then column. Distances compare as exact integer
    squares.
    """
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ValueError("fps needs at least one point")
    if k < 1:
        raise ValueError("k must be >= 1")
    cr, cc = pts[:, 0].mean(), pts[:, 1].mean()
    d2c = (pts[:, 0] - cr) ** 2 + (pts[:, 1] - cc) ** 2
    first = int(np.lexsort((pts[:, 1], pts[:, 0], d2c))[0])
    chosen = [first]
    mind2 = (pts[:, 0] - pts[first, 0]) ** 2 + (pts[:, 1] - pts[first, 1]) ** 2
    while len(chosen) < min(k, pts.shape[0]):
        best = int(np.lexsort((pts[:, 1], pts[:, 0], -mind2))[0])
        chosen.append(best)
        d2 = (pts[:, 0] - pts[best, 0]) ** 2 + (pts[:, 1] - pts[best, 1]) ** 2
        mind2 = np.minimum(mind2, d2)
    return [(int(pts[i, 0]), int(pts[i, 1])) for i in chosen]


def sample_turning_points(
    vol: Volume3D,
    term: TrackStop,
    axis: PlaneAxis,
    backend: SegmenterBackend,
    cfg: EngineConfig,
) -> list[Seed]:
    """Candidate seeds near a tracking terminus.

    Segments the two orthogonal planes through the terminal position with
    a point prompt there; each qualifying mask contributes k_turning
    farthest-point samples lifted back into the volume.
    """
    out: list[Seed] = []
    seen: set[tuple[int, int, int]] = set()
    for p in (PlaneAxis.Z, PlaneAxis.Y, PlaneAxis.X):
        if p == axis:
            continue
        index = term.pos[p]
        image = extract_plane(vol, p, index)
        res = segment(backend, image, Prompt(point=inplane_coords(term.pos, p)), cfg.min_mask_px)
        if res.probability > cfg.tau and not res.mask.is_empty():
            for rc in fps(np.argwhere(res.mask.bits), cfg.k_turning):
                pos = lift_coords(rc, p, index)
                if pos not in seen:
                    seen.add(pos)
                    out.append(Seed(pos))
    return out


# ---------------------------------------------------------------------------
# Traversal
# ---------------------------------------------------------------------------

@dataclass
class TraverseOutcome:
    mask: np.ndarray
    warned: bool
    tracks: int
    continuations: list[tuple[tuple[int, int, int], tuple[int, int, int]]]


def _traverse(
    vol: Volume3D,
    seed0: Seed,
    backend: SegmenterBackend,
    cfg: EngineConfig,
    visited: VisitedSet,
    offset: tuple[int, int, int] = (0, 0, 0),
    global_shape: Optional[tuple[int, int, int]] = None,
    on_event: EventHook = None,
) -> TraverseOutcome:
    shape = vol.shape
    if global_shape is None:
        global_shape = shape
    for d in range(3):
        if not 0 <= seed0.pos[d] < shape[d]:
            raise ValueError(f"seed {seed0.pos} outside volume of shape {shape}")
    budget = 3 * shape[0] * shape[1] * shape[2]
    lifo = cfg.traversal_order == "lifo"
    pending: deque[tuple[int, int, int]] = deque([seed0.pos])
    queued = {seed0.pos}
    pred = np.zeros(shape, dtype=bool)
    warned = False
    tracks = 0
    continuations: list[tuple[tuple[int, int, int], tuple[int, int, int]]] = []

    def emit(payload: dict) -> None:
        if on_event is not None:
            on_event(payload)

    while pending:
        pos = pending.pop() if lifo else pending.popleft()
        queued.discard(pos)
        sel = plane_select(vol, Seed(pos), backend, cfg)
        if sel is None:
            emit({"event": "skip", "seed": list(pos), "reason": "no_plane"})
            continue
        axis, initial = sel
        if visited.is_visited(pos, axis):
            emit({"event": "skip", "seed": list(pos), "axis": axis.label, "reason": "visited"})
            continue
        if tracks >= budget:
            warned = True
            emit({"event": "budget_exceeded", "tracks": tracks})
            break
        tracks += 1
        seg = track(vol, Seed(pos), axis, initial, backend, cfg)
        pred |= seg.embed(shape)
        visited.mark(seg)
        added = 0
        if cfg.turning_points:
            for term in seg.terminal_prompts:
                for cand in sample_turning_points(vol, term, axis, backend, cfg):
                    if cand.pos not in queued:
                        pending.append(cand.pos)
                        queued.add(cand.pos)
                        added += 1
        for stop in seg.boundary_stops:
            gpos = tuple(stop.pos[d] + offset[d] for d in range(3))
            gnext = list(gpos)
            gnext[axis] += stop.direction
            if 0 <= gnext[axis] < global_shape[axis]:
                continuations.append((gpos, tuple(gnext)))
        emit(
            {
                "event": "track",
                "seed": list(pos),
                "axis": axis.label,
                "slices": len(seg.slice_masks),
                "voxels": seg.voxel_count(),
                "stops": [{"direction": s.direction, "reason": s.reason} for s in seg.stops],
                "turning_seeds": added,
            }
        )
    return TraverseOutcome(mask=pred, warned=warned, tracks=tracks, continuations=continuations)


def traverse(
    vol: Volume3D,
    seed0: Seed,
    backend: SegmenterBackend,
    cfg: EngineConfig,
    visited: Optional[VisitedSet] = None,
    on_event: EventHook = None,
) -> LabelVolume:
    """Grow one connected prediction from a single seed (label id 1)."""
    if visited is None:
        visited = VisitedSet(vol.shape)
    outcome = _traverse(vol, seed0, backend, cfg, visited, on_event=on_event)
    return LabelVolume(
        labels=outcome.mask.astype(np.uint32), voxel_size_nm=vol.voxel_size_nm
    )


# ---------------------------------------------------------------------------
# Multi-seed / chunked execution with fusion
# ---------------------------------------------------------------------------

def _axis_windows(n: int, cs: int) -> list[tuple[int, int]]:
    """Chunk windows along one axis, overlapping the next window by one
    voxel so tracks crossing a seam share voxels and fuse."""
    if cs >= n:
        return [(0, n)]
    count = ceil(n / cs)
    return [(i * cs, min((i + 1) * cs + 1, n)) for i in range(count)]


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def run(
    vol: Volume3D,
    seeds: Sequence[Seed],
    backend: SegmenterBackend,
    cfg: EngineConfig,
    workers: int = 1,
    backend_factory: Optional[Callable[[], SegmenterBackend]] = None,
    on_event: EventHook = None,
) -> LabelVolume:
    """Traverse from every seed (optionally chunked) and fuse the results.

    Voxel sets from different traversals merge into one instance when they
    share at least one voxel; instance ids run 1..k in traversal order.
    Chunked mode tracks within overlapping sub-volume windows and re-seeds
    across seam slices, so instances crossing chunk boundaries still fuse.
    """
    shape = vol.shape
    chunk = cfg.chunk_shape or shape
    windows = [_axis_windows(shape[d], chunk[d]) for d in range(3)]
    ncells = tuple(len(w) for w in windows)

    def cell_of(pos: tuple[int, int, int]) -> tuple[int, int, int]:
        return tuple(min(pos[d] // chunk[d], ncells[d] - 1) for d in range(3))

    visited_by_cell: dict[tuple[int, int, int], VisitedSet] = {}
    seen_by_cell: dict[tuple[int, int, int], set] = {}
    traversal_coords: list[np.ndarray] = []

    def chunk_task(cell, positions):
        lo = [windows[d][cell[d]][0] for d in range(3)]
        hi = [windows[d][cell[d]][1] for d in range(3)]
        sub = Volume3D(
            data=np.ascontiguousarray(vol.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]),
            voxel_size_nm=vol.voxel_size_nm,
        )
        visited = visited_by_cell.setdefault(cell, VisitedSet(sub.shape))
        base = backend_factory() if backend_factory else backend
        local_backend = base.restrict_window(tuple(lo), tuple(hi))
        results = []
        conts = []
        for gpos in positions:
            local = Seed(tuple(gpos[d] - lo[d] for d in range(3)))
            outcome = _traverse(
                vol=sub,
                seed0=local,
                backend=local_backend,
                cfg=replace(cfg, chunk_shape=None),
                visited=visited,
                offset=tuple(lo),
                global_shape=shape,
                on_event=on_event,
            )
            flat = np.flatnonzero(outcome.mask.ravel())
            if flat.size:
                zz, yy, xx = np.unravel_index(flat, sub.shape)
                gflat = ((zz + lo[0]) * shape[1] + (yy + lo[1])) * shape[2] + (xx + lo[2])
                results.append(np.sort(gflat))
            else:
                results.append(flat)
            conts.extend(outcome.continuations)
        return results, conts

    wave: list[tuple[tuple[int, int, int], tuple[int, int, int]]] = []
    for seed in seeds:
        for d in range(3):
            if not 0 <= seed.pos[d] < shape[d]:
                raise ValueError(f"seed {seed.pos} outside volume of shape {shape}")
        wave.append((cell_of(seed.pos), seed.pos))

    while wave:
        grouped: dict[tuple[int, int, int], list[tuple[int, int, int]]] = {}
        for cell, pos in wave:
            seen = seen_by_cell.setdefault(cell, set())
            if pos in seen:
                continue
            seen.add(pos)
            grouped.setdefault(cell, []).append(pos)
        tasks = sorted(grouped.items())
        if not tasks:
            break
        if workers > 1 and len(tasks) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(chunk_task, cell, positions) for cell, positions in tasks]
                outputs = [f.result() for f in futures]
        else:
            outputs = [chunk_task(cell, positions) for cell, positions in tasks]
        wave = []
        for results, conts in outputs:
            traversal_coords.extend(results)
            for gpos, gnext in conts:
                wave.append((cell_of(gnext), gpos))

    labels = np.zeros(shape[0] * shape[1] * shape[2], dtype=np.int32)
    owner = np.zeros_like(labels)
    uf = _UnionFind(len(traversal_coords) + 1)
    for ti, coords in enumerate(traversal_coords, start=1):
        if coords.size == 0:
            continue
        holders = owner[coords]
        for other in np.unique(holders):
            if other != 0:
                uf.union(ti, int(other))
        owner[coords[holders == 0]] = ti
    id_map: dict[int, int] = {}
    for ti, coords in enumerate(traversal_coords, start=1):
        if coords.size == 0:
            continue
        root = uf.find(ti)
        if root not in id_map:
            id_map[root] = len(id_map) + 1
        labels[coords] = id_map[root]
    return LabelVolume(
        labels=labels.reshape(shape).astype(np.uint32), voxel_size_nm=vol.voxel_size_nm
    )
