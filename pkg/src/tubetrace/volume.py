"""Volume data model, container I/O, plane extraction, and image primitives.

Volumes are scalar intensity grids indexed (z, y, x) with a physical voxel
size in nanometers. The on-disk container is a JSON header (``*.volj``)
pointing at a raw little-endian payload in z-major row-major order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Optional

import numpy as np

from . import _kernels


class VolumeError(Exception):
    """Raised for malformed containers and invalid volume operations."""


_DTYPES = {"u8": np.uint8, "u16": np.uint16, "u32": np.uint32}
_DTYPE_NAMES = {np.dtype(np.uint8): "u8", np.dtype(np.uint16): "u16", np.dtype(np.uint32): "u32"}


class PlaneAxis(IntEnum):
    """Slice-family axis; enum order z < y < x is the tie-break order."""

    Z = 0
    Y = 1
    X = 2

    @classmethod
    def from_name(cls, name: str) -> "PlaneAxis":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown axis {name!r}; expected one of z, y, x") from None

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class Volume3D:
    """Scalar intensity volume, shape (nz, ny, nx), dtype u8 or u16."""

    data: np.ndarray
    voxel_size_nm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise VolumeError(f"volume data must be 3D, got shape {self.data.shape}")
        if self.data.dtype not in (np.uint8, np.uint16):
            raise VolumeError(f"volume dtype must be u8 or u16, got {self.data.dtype}")
        if len(self.voxel_size_nm) != 3 or any(s <= 0 for s in self.voxel_size_nm):
            raise VolumeError(f"voxel size must be 3 positive reals, got {self.voxel_size_nm}")
        object.__setattr__(self, "voxel_size_nm", tuple(float(s) for s in self.voxel_size_nm))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabelVolume:
    """Instance labeling over a volume grid; 0 is background."""

    labels: np.ndarray
    voxel_size_nm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise VolumeError(f"label data must be 3D, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise VolumeError(f"label dtype must be integer, got {self.labels.dtype}")
        object.__setattr__(self, "voxel_size_nm", tuple(float(s) for s in self.voxel_size_nm))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    def ids(self) -> np.ndarray:
        present = np.unique(self.labels)
        return present[present != 0]


@dataclass(frozen=True)
class Image2D:
    """A single extracted plane: (rows, cols) scalars plus provenance."""

    data: np.ndarray
    pixel_size: tuple[float, float] = (1.0, 1.0)
    origin: Optional[tuple[PlaneAxis, int]] = None

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise VolumeError(f"image must be 2D and non-empty, got shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Mask2D:
    """Binary in-plane mask with a cached pixel count."""

    bits: np.ndarray
    area_px: int = field(default=-1)

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits.astype(bool, copy=False))
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "area_px", int(bits.sum()))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def is_empty(self) -> bool:
        return self.area_px == 0


# ---------------------------------------------------------------------------
# Container I/O
# ---------------------------------------------------------------------------

def _read_header(path: Path) -> dict:
    if not path.exists():
        raise VolumeError(f"no such volume header: {path}")
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeError(f"invalid volume header {path}: {exc}") from exc
    for key in ("shape", "dtype", "data"):
        if key not in header:
            raise VolumeError(f"volume header {path} missing field {key!r}")
    return header


def _load_payload(path: Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    header = _read_header(path)
    shape = tuple(int(n) for n in header["shape"])
    if len(shape) != 3 or any(n <= 0 for n in shape):
        raise VolumeError(f"bad shape {header['shape']} in {path}")
    dtype_name = header["dtype"]
    if dtype_name not in _DTYPES:
        raise VolumeError(f"unsupported dtype {dtype_name!r} in {path}")
    dtype = np.dtype(_DTYPES[dtype_name]).newbyteorder("<")
    voxel = tuple(float(s) for s in header.get("voxel_size_nm", (1.0, 1.0, 1.0)))
    payload_path = path.parent / header["data"]
    if not payload_path.exists():
        raise VolumeError(f"missing payload file: {payload_path}")
    raw = payload_path.read_bytes()
    expected = math.prod(shape) * dtype.itemsize
    if len(raw) != expected:
        raise VolumeError(
            f"payload size mismatch for {path}: expected {expected} bytes, got {len(raw)}"
        )
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("=")), voxel


def load_volume(path: str | Path) -> Volume3D:
    """Load an intensity volume from a ``.volj`` header file."""
    arr, voxel = _load_payload(Path(path))
    if arr.dtype == np.uint32:
        raise VolumeError(f"{path} holds u32 labels; use load_labels")
    return Volume3D(data=arr, voxel_size_nm=voxel)


def load_labels(path: str | Path) -> LabelVolume:
    """Load an instance labeling from a ``.volj`` header file (dtype u32)."""
    arr, voxel = _load_payload(Path(path))
    return LabelVolume(labels=arr.astype(np.uint32, copy=False), voxel_size_nm=voxel)


def _save_container(arr: np.ndarray, voxel_size_nm, path: Path) -> Path:
    if path.suffix != ".volj":
        path = path.with_suffix(".volj")
    dtype_name = _DTYPE_NAMES[np.dtype(arr.dtype)]
    payload_name = path.stem + ".raw"
    header = {
        "shape": [int(n) for n in arr.shape],
        "dtype": dtype_name,
        "voxel_size_nm": [float(s) for s in voxel_size_nm],
        "data": payload_name,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    little = arr.astype(np.dtype(arr.dtype).newbyteorder("<"), copy=False)
    (path.parent / payload_name).write_bytes(np.ascontiguousarray(little).tobytes())
    path.write_text(json.dumps(header, indent=2) + "\n")
    return path


def save_volume(vol: Volume3D, path: str | Path) -> Path:
    return _save_container(vol.data, vol.voxel_size_nm, Path(path))


def save_labels(labels: LabelVolume, path: str | Path) -> Path:
    arr = labels.labels.astype(np.uint32, copy=False)
    return _save_container(arr, labels.voxel_size_nm, Path(path))


# ---------------------------------------------------------------------------
# Plane geometry
# ---------------------------------------------------------------------------

def extract_plane(vol: Volume3D, axis: PlaneAxis, index: int) -> Image2D:
    """Slice the volume perpendicular to `axis` at `index`.

    Plane layouts: z -> (rows=y, cols=x), y -> (rows=z, cols=x),
    x -> (rows=z, cols=y).
    """
    nz, ny, nx = vol.shape
    dz, dy, dx = vol.voxel_size_nm
    extent = vol.shape[int(axis)]
    if not 0 <= index < extent:
        raise IndexError(f"plane index {index} out of range for axis {axis.label} (extent {extent})")
    if axis == PlaneAxis.Z:
        data, pixel = vol.data[index, :, :], (dy, dx)
    elif axis == PlaneAxis.Y:
        data, pixel = vol.data[:, index, :], (dz, dx)
    else:
        data, pixel = vol.data[:, :, index], (dz, dy)
    return Image2D(data=np.ascontiguousarray(data), pixel_size=pixel, origin=(axis, index))


def inplane_coords(pos: tuple[int, int, int], axis: PlaneAxis) -> tuple[int, int]:
    """Project a (z, y, x) position onto the plane perpendicular to `axis`."""
    z, y, x = pos
    if axis == PlaneAxis.Z:
        return (y, x)
    if axis == PlaneAxis.Y:
        return (z, x)
    return (z, y)


def lift_coords(rc: tuple[int, int], axis: PlaneAxis, index: int) -> tuple[int, int, int]:
    """Inverse of :func:`inplane_coords`: embed plane pixel into the volume."""
    r, c = rc
    if axis == PlaneAxis.Z:
        return (index, r, c)
    if axis == PlaneAxis.Y:
        return (r, index, c)
    return (r, c, index)


# ---------------------------------------------------------------------------
# Image-processing primitives
# ---------------------------------------------------------------------------

def gaussian_blur3d(vol: Volume3D, sigma: float) -> Volume3D:
    """Separable Gaussian blur, truncation radius ceil(3*sigma), reflect pad.

    Computed in float64 and re-quantized by rounding to the input dtype.
    sigma=0 is the identity.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return vol
    blurred = _kernels.blur_volume(vol.data, sigma)
    info = np.iinfo(vol.data.dtype)
    quantized = np.clip(np.rint(blurred), info.min, info.max).astype(vol.data.dtype)
    return Volume3D(data=quantized, voxel_size_nm=vol.voxel_size_nm)


def percentile_threshold(vol: Volume3D, q: float) -> int:
    """Nearest-rank percentile: smallest t with >= q% of voxels <= t."""
    if not 0 <= q <= 100:
        raise ValueError("percentile must be in [0, 100]")
    values = vol.data.ravel()
    n = values.size
    if n == 0:
        raise VolumeError("cannot take a percentile of an empty volume")
    k = max(1, math.ceil(q * n / 100.0))
    return int(np.partition(values, k - 1)[k - 1])


def connected_components(
    binary: np.ndarray, connectivity: int = 26
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Label a binary 2D/3D array; returns (labels, counts, centroids).

    Labels run 1..k in first-encounter scan order (z, then y, then x);
    centroids are arithmetic means of member coordinates.
    """
    labels = _kernels.label_components(np.asarray(binary), connectivity)
    counts, centroids = _kernels.component_stats(labels)
    return labels, counts, centroids


def fill_holes_2d(mask: Mask2D) -> Mask2D:
    """Fill background regions not 4-connected to the image border."""
    bits = mask.bits
    if mask.is_empty():
        return mask
    bg_labels = _kernels.label_components(~bits, 4)
    border = np.zeros_like(bits)
    border[0, :] = border[-1, :] = True
    border[:, 0] = border[:, -1] = True
    outside = np.unique(bg_labels[border & ~bits])
    outside = outside[outside != 0]
    filled = bits | (~bits & ~np.isin(bg_labels, outside))
    return Mask2D(bits=filled)


def remove_small_components_mask(mask: Mask2D, min_px: int, connectivity: int = 8) -> Mask2D:
    """Drop mask components with fewer than min_px pixels (strict)."""
    if min_px <= 0 or mask.is_empty():
        return mask
    labels = _kernels.label_components(mask.bits, connectivity)
    counts = np.bincount(labels.ravel())
    keep = counts >= min_px
    keep[0] = False
    return Mask2D(bits=keep[labels])


def remove_small_components(labels: LabelVolume, min_voxels: int) -> LabelVolume:
    """Zero out label ids whose voxel count is below min_voxels (strict)."""
    if min_voxels <= 0:
        return labels
    arr = labels.labels
    counts = np.bincount(arr.ravel().astype(np.int64))
    keep = counts >= min_voxels
    keep[0] = False
    out = np.where(keep[arr], arr, 0).astype(arr.dtype)
    return LabelVolume(labels=out, voxel_size_nm=labels.voxel_size_nm)


def deflicker_z(vol: Volume3D, window: int = 11) -> Volume3D:
    """Shift each z-slice additively so its mean follows a moving average.

    The target for slice z is the average of slice means over the centered
    window, shrunk at the volume ends. Output is clipped to the dtype range.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    if window == 1:
        return vol
    nz = vol.shape[0]
    means = vol.data.reshape(nz, -1).mean(axis=1)
    half = window // 2
    info = np.iinfo(vol.data.dtype)
    out = np.empty_like(vol.data)
    for z in range(nz):
        lo, hi = max(0, z - half), min(nz, z + half + 1)
        target = means[lo:hi].mean()
        shifted = vol.data[z].astype(np.float64) + (target - means[z])
        out[z] = np.clip(np.rint(shifted), info.min, info.max).astype(vol.data.dtype)
    return Volume3D(data=out, voxel_size_nm=vol.voxel_size_nm)
