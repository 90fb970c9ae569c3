"""Initial seed generation by global intensity thresholding.

Bright structures are isolated at a high percentile cutoff; each
sufficiently large connected component contributes one seed at its
center.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Seed
from .volume import Volume3D, connected_components, percentile_threshold


@dataclass
class SeedingConfig:
    eta_percentile: float = 98.0
    min_component_voxels: int = 50

    def __post_init__(self):
        if not 0.0 <= self.eta_percentile <= 100.0:
            raise ValueError("eta_percentile must be in [0, 100]")
        if self.min_component_voxels < 0:
            raise ValueError("min_component_voxels must be >= 0")


def generate_seeds(vol: Volume3D, cfg: SeedingConfig | None = None) -> list[Seed]:
    """One seed per bright connected component, largest component first.

    Foreground is strictly above the eta-percentile intensity; components
    use 26-connectivity. Each seed is the component centroid rounded to a
    voxel, snapped to the nearest component voxel when the rounded
    centroid falls off-component.
    """
    cfg = cfg or SeedingConfig()
    cutoff = percentile_threshold(vol, cfg.eta_percentile)
    fg = vol.data > cutoff
    labels, counts, centroids = connected_components(fg, connectivity=26)
    order = sorted(
        (i for i in range(counts.size) if counts[i] >= cfg.min_component_voxels),
        key=lambda i: (-counts[i], i),
    )
    seeds = []
    for i in order:
        cid = i + 1
        pos = tuple(int(round(c)) for c in centroids[i])
        inside = all(0 <= pos[d] < labels.shape[d] for d in range(3))
        if not inside or labels[pos] != cid:
            coords = np.argwhere(labels == cid)
            d2 = ((coords - centroids[i]) ** 2).sum(axis=1)
            best = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0], d2))[0]
            pos = tuple(int(v) for v in coords[best])
        seeds.append(Seed(pos))
    return seeds
