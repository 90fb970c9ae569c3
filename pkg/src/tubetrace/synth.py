"""Synthetic vessel-tree phantoms: piecewise-linear centerline trees
rasterized as capsules, with bright-on-dark intensity, noise, and optional
per-slice flicker. Paired (intensity, labels, seeds) outputs drive the
desk-scale verification suite."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._kernels import paint_capsule
from .engine import Seed
from .volume import LabelVolume, Volume3D

_MAX_SEGMENTS = 14
_MAX_DEPTH = 4
_BRANCH_ANGLE_DEG = (40.0, 70.0)


@dataclass
class SynthSpec:
    shape: tuple[int, int, int] = (64, 64, 64)
    n_trees: int = 1
    radius_range: tuple[float, float] = (2.0, 4.0)
    branch_prob: float = 0.3
    segment_len_range: tuple[float, float] = (14.0, 26.0)
    turn_angle_max: float = 35.0
    fg_intensity: int = 200
    bg_intensity: int = 30
    noise_sigma: float = 5.0
    flicker_amp: float = 0.0
    rng_seed: int = 0
    voxel_size_nm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # Optional growth control: force each tree's bifurcation count into
    # [lo, hi] (regrowing deterministically until the minimum is met).
    bifurcation_range: tuple[int, int] | None = None

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        self.radius_range = tuple(float(r) for r in self.radius_range)
        self.segment_len_range = tuple(float(v) for v in self.segment_len_range)
        self.voxel_size_nm = tuple(float(v) for v in self.voxel_size_nm)
        if self.radius_range[0] < 1:
            raise ValueError("minimum tube radius must be >= 1 voxel")
        if self.fg_intensity <= self.bg_intensity + 3 * self.noise_sigma:
            raise ValueError("fg_intensity must exceed bg_intensity + 3*noise_sigma")
        if 2 * self.radius_range[1] + 4 >= min(self.shape):
            raise ValueError("tube radius too large for the volume")
        if self.bifurcation_range is not None:
            self.bifurcation_range = (int(self.bifurcation_range[0]), int(self.bifurcation_range[1]))
            lo, hi = self.bifurcation_range
            if lo < 0 or hi < lo:
                raise ValueError("bifurcation_range must satisfy 0 <= lo <= hi")
            if lo >= 1 and self.branch_prob <= 0:
                raise ValueError("a minimum bifurcation count needs branch_prob > 0")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        kwargs = dict(data)
        for key in ("shape", "radius_range", "segment_len_range", "voxel_size_nm", "bifurcation_range"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Branch:
    p0: np.ndarray
    p1: np.ndarray
    radius: float

    def length(self) -> float:
        return float(np.linalg.norm(self.p1 - self.p0))


@dataclass
class TreePlan:
    branches: list[Branch] = field(default_factory=list)
    bifurcations: int = 0

    def trunk_mid(self) -> np.ndarray:
        return (self.branches[0].p0 + self.branches[0].p1) / 2.0

    def total_length(self) -> float:
        return sum(b.length() for b in self.branches)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _random_direction(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        if n > 1e-6:
            return v / n


def _perpendicular(rng: np.random.Generator, d: np.ndarray) -> np.ndarray:
    while True:
        raw = rng.normal(size=3)
        u = raw - (raw @ d) * d
        n = np.linalg.norm(u)
        if n > 1e-6:
            return u / n


def _perturb(rng: np.random.Generator, d: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate d by angle_deg about a random axis perpendicular to it."""
    if angle_deg == 0.0:
        return d
    u = _perpendicular(rng, d)
    a = np.deg2rad(angle_deg)
    return _unit(np.cos(a) * d + np.sin(a) * u)


def _grow_tree(rng: np.random.Generator, spec: SynthSpec, start: np.ndarray) -> TreePlan:
    lo = np.full(3, spec.radius_range[1] + 2.0)
    hi = np.asarray(spec.shape, dtype=np.float64) - spec.radius_range[1] - 2.0
    max_bif = np.inf if spec.bifurcation_range is None else spec.bifurcation_range[1]
    radius = float(rng.uniform(*spec.radius_range))
    plan = TreePlan()
    queue: list[tuple[np.ndarray, np.ndarray, int]] = [(start, _random_direction(rng), 0)]
    while queue and len(plan.branches) < _MAX_SEGMENTS:
        pos, d, depth = queue.pop(0)
        length = rng.uniform(*spec.segment_len_range)
        end = pos + length * d
        # shorten the step so the capsule stays inside the volume
        scale = 1.0
        for k in range(3):
            if end[k] < lo[k]:
                scale = min(scale, (lo[k] - pos[k]) / (end[k] - pos[k]))
            elif end[k] > hi[k]:
                scale = min(scale, (hi[k] - pos[k]) / (end[k] - pos[k]))
        end = pos + scale * length * d
        if np.linalg.norm(end - pos) < 2.0:
            continue
        plan.branches.append(Branch(p0=pos.copy(), p1=end.copy(), radius=radius))
        if depth >= _MAX_DEPTH:
            continue
        wants_branch = rng.random() < spec.branch_prob and plan.bifurcations < max_bif
        if wants_branch and len(plan.branches) + len(queue) + 2 <= _MAX_SEGMENTS:
            plan.bifurcations += 1
            # children diverge to opposite sides of the parent direction
            axis_u = _perpendicular(rng, d)
            for sign in (1.0, -1.0):
                a = np.deg2rad(rng.uniform(*_BRANCH_ANGLE_DEG))
                child = _unit(np.cos(a) * d + sign * np.sin(a) * axis_u)
                queue.append((end, child, depth + 1))
        else:
            turned = _perturb(rng, d, float(rng.uniform(0.0, spec.turn_angle_max)))
            queue.append((end, turned, depth + 1))
    return plan


def _grow_tree_bounded(rng: np.random.Generator, spec: SynthSpec, start: np.ndarray) -> TreePlan:
    min_bif = 0 if spec.bifurcation_range is None else spec.bifurcation_range[0]
    plan = _grow_tree(rng, spec, start)
    attempts = 0
    while plan.bifurcations < min_bif:
        attempts += 1
        if attempts > 200:
            raise RuntimeError("could not grow a tree with the requested bifurcation count")
        plan = _grow_tree(rng, spec, start)
    return plan


def plan_trees(spec: SynthSpec, rng: np.random.Generator | None = None) -> list[TreePlan]:
    """Grow the centerline trees only (deterministic given spec.rng_seed)."""
    rng = rng or np.random.default_rng(spec.rng_seed)
    margin = spec.radius_range[1] + 2.0
    lo = np.full(3, margin)
    hi = np.asarray(spec.shape, dtype=np.float64) - margin
    plans: list[TreePlan] = []
    starts: list[np.ndarray] = []
    for _ in range(spec.n_trees):
        start = None
        for _ in range(50):
            cand = rng.uniform(lo, hi)
            gap = 4.0 * spec.radius_range[1]
            if all(np.linalg.norm(cand - s) >= gap for s in starts):
                start = cand
                break
        if start is None:
            start = rng.uniform(lo, hi)
        starts.append(start)
        plans.append(_grow_tree_bounded(rng, spec, start))
    return plans


def paint_tube(
    labels: np.ndarray,
    p0,
    p1,
    radius: float,
    value: int,
    voxel_size_nm: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> None:
    """Rasterize one capsule into an integer label array (0-voxels only).

    The radius is measured in units of the smallest voxel dimension so
    tubes are round in physical space.
    """
    radius_nm = radius * min(voxel_size_nm)
    paint_capsule(
        labels,
        np.asarray(p0, dtype=np.float64),
        np.asarray(p1, dtype=np.float64),
        radius_nm,
        np.asarray(voxel_size_nm, dtype=np.float64),
        value,
    )


def rasterize_plans(plans: list[TreePlan], spec: SynthSpec) -> np.ndarray:
    labels = np.zeros(spec.shape, dtype=np.int32)
    for tid, plan in enumerate(plans, start=1):
        for branch in plan.branches:
            paint_tube(labels, branch.p0, branch.p1, branch.radius, tid, spec.voxel_size_nm)
    return labels


def render_intensity(labels: np.ndarray, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Bright foreground on dark background plus noise and slice flicker."""
    img = np.where(labels > 0, float(spec.fg_intensity), float(spec.bg_intensity))
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=labels.shape)
    if spec.flicker_amp > 0:
        offsets = rng.uniform(-spec.flicker_amp, spec.flicker_amp, size=labels.shape[0])
        img = img + offsets[:, None, None]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate(spec: SynthSpec) -> tuple[Volume3D, LabelVolume, list[Seed]]:
    """Produce (intensity volume, instance labels, one trunk seed per tree).

    Bit-identical for identical specs: all randomness flows from one
    generator seeded with spec.rng_seed. Trees overlap first-writer-wins;
    a tree that ends up owning no voxels contributes no seed.
    """
    rng = np.random.default_rng(spec.rng_seed)
    plans = plan_trees(spec, rng)
    labels = rasterize_plans(plans, spec)
    seeds: list[Seed] = []
    for tid, plan in enumerate(plans, start=1):
        if not plan.branches:
            continue
        mid = plan.trunk_mid()
        pos = tuple(int(round(v)) for v in mid)
        inside = all(0 <= pos[d] < spec.shape[d] for d in range(3))
        if not inside or labels[pos] != tid:
            coords = np.argwhere(labels == tid)
            if coords.size == 0:
                continue
            d2 = ((coords - mid) ** 2).sum(axis=1)
            best = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0], d2))[0]
            pos = tuple(int(v) for v in coords[best])
        seeds.append(Seed(pos))
    img = render_intensity(labels, spec, rng)
    vol = Volume3D(data=img, voxel_size_nm=spec.voxel_size_nm)
    gt = LabelVolume(labels=labels.astype(np.uint32), voxel_size_nm=spec.voxel_size_nm)
    return vol, gt, seeds
