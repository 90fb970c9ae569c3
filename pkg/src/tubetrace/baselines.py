"""Zero-shot comparison methods: global color thresholding and per-slice
auto-mask tracking by IoU."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .segmenter import SegmenterBackend, auto_masks
from .volume import (
    LabelVolume,
    PlaneAxis,
    Volume3D,
    connected_components,
    extract_plane,
    gaussian_blur3d,
)


def color_threshold_baseline(
    vol: Volume3D,
    chunk_shape: tuple[int, int, int] = (10, 512, 512),
    sigma: float = 1.0,
    k_sigma: float = 3.0,
    min_voxels: int = 1000,
) -> LabelVolume:
    """Blur per chunk, mark voxels k_sigma stds above the chunk mean, then
    keep 26-connected components of at least min_voxels voxels."""
    nz, ny, nx = vol.shape
    cz, cy, cx = chunk_shape
    marked = np.zeros(vol.shape, dtype=bool)
    for z0 in range(0, nz, cz):
        for y0 in range(0, ny, cy):
            for x0 in range(0, nx, cx):
                view = vol.data[z0 : z0 + cz, y0 : y0 + cy, x0 : x0 + cx]
                sub = Volume3D(data=np.ascontiguousarray(view), voxel_size_nm=vol.voxel_size_nm)
                blurred = gaussian_blur3d(sub, sigma).data.astype(np.float64)
                cutoff = blurred.mean() + k_sigma * blurred.std()
                marked[z0 : z0 + cz, y0 : y0 + cy, x0 : x0 + cx] = blurred > cutoff
    labels, counts, _ = connected_components(marked, connectivity=26)
    keep = np.concatenate(([False], counts >= min_voxels))
    lut = np.zeros(counts.size + 1, dtype=np.int64)
    lut[np.flatnonzero(keep)] = np.arange(1, int(keep.sum()) + 1)
    return LabelVolume(labels=lut[labels].astype(np.uint32), voxel_size_nm=vol.voxel_size_nm)


@dataclass
class _Track:
    current: np.ndarray
    slices: dict[int, np.ndarray] = field(default_factory=dict)
    active: bool = True


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = int((a & b).sum())
    if inter == 0:
        return 0.0
    return inter / int((a | b).sum())


def iou_tracking_baseline(
    vol: Volume3D,
    backend: SegmenterBackend,
    iou_threshold: float = 0.5,
    min_mask_px: int = 10,
) -> LabelVolume:
    """Auto-mask every z-slice and chain masks greedily by maximum IoU.

    Each active track claims the unclaimed mask of maximum IoU in the next
    slice if that IoU exceeds the threshold, otherwise it terminates; every
    mask left unclaimed starts a new track. Tracks become instances.
    """
    tracks: list[_Track] = []
    for z in range(vol.shape[0]):
        image = extract_plane(vol, PlaneAxis.Z, z)
        masks = [r.mask.bits for r in auto_masks(backend, image, min_mask_px)]
        claimed = [False] * len(masks)
        for tr in tracks:
            if not tr.active:
                continue
            best_j, best_iou = -1, 0.0
            for j, bits in enumerate(masks):
                if claimed[j]:
                    continue
                iou = _iou(tr.current, bits)
                if iou > best_iou:
                    best_j, best_iou = j, iou
            if best_j >= 0 and best_iou > iou_threshold:
                claimed[best_j] = True
                tr.current = masks[best_j]
                tr.slices[z] = masks[best_j]
            else:
                tr.active = False
        for j, bits in enumerate(masks):
            if not claimed[j]:
                tracks.append(_Track(current=bits, slices={z: bits}))
    labels = np.zeros(vol.shape, dtype=np.uint32)
    for tid, tr in enumerate(tracks, start=1):
        for z, bits in tr.slices.items():
            plane = labels[z]
            plane[bits & (plane == 0)] = tid
    return LabelVolume(labels=labels, voxel_size_nm=vol.voxel_size_nm)
