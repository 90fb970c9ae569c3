"""Hot numeric kernels with numba acceleration and a numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``TUBETRACE_NO_NUMBA`` is unset (or "0"). Both paths produce
bit-identical results: labelings are canonicalized to first-encounter
scan order, and the float kernels accumulate taps in the same order.
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("TUBETRACE_NO_NUMBA", "")
NUMBA_DISABLED = _FLAG not in ("", "0")

try:
    if NUMBA_DISABLED:
        raise ImportError("disabled via TUBETRACE_NO_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def active_path() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# Neighbor offsets
# ---------------------------------------------------------------------------

def _offsets_3d(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        offs = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
    elif connectivity == 26:
        offs = [
            (dz, dy, dx)
            for dz in (-1, 0, 1)
            for dy in (-1, 0, 1)
            for dx in (-1, 0, 1)
            if (dz, dy, dx) != (0, 0, 0)
        ]
    else:
        raise ValueError(f"3D connectivity must be 6 or 26, got {connectivity}")
    return np.asarray(offs, dtype=np.int64)


def _offsets_2d(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        offs = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    elif connectivity == 8:
        offs = [
            (dr, dc)
            for dr in (-1, 0, 1)
            for dc in (-1, 0, 1)
            if (dr, dc) != (0, 0)
        ]
    else:
        raise ValueError(f"2D connectivity must be 4 or 8, got {connectivity}")
    return np.asarray(offs, dtype=np.int64)


# ---------------------------------------------------------------------------
# Connected-component labeling
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _label_3d_numba(fg, offs):  # pragma: no cover - exercised via dispatcher
        nz, ny, nx = fg.shape
        labels = np.zeros((nz, ny, nx), dtype=np.int32)
        stack = np.empty(nz * ny * nx, dtype=np.int64)
        nxt = 0
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    if not fg[z, y, x] or labels[z, y, x] != 0:
                        continue
                    nxt += 1
                    labels[z, y, x] = nxt
                    top = 0
                    stack[top] = (z * ny + y) * nx + x
                    top += 1
                    while top > 0:
                        top -= 1
                        flat = stack[top]
                        cx = flat % nx
                        cy = (flat // nx) % ny
                        cz = flat // (nx * ny)
                        for k in range(offs.shape[0]):
                            tz = cz + offs[k, 0]
                            ty = cy + offs[k, 1]
                            tx = cx + offs[k, 2]
                            if tz < 0 or tz >= nz or ty < 0 or ty >= ny or tx < 0 or tx >= nx:
                                continue
                            if fg[tz, ty, tx] and labels[tz, ty, tx] == 0:
                                labels[tz, ty, tx] = nxt
                                stack[top] = (tz * ny + ty) * nx + tx
                                top += 1
        return labels

    @njit(cache=True)
    def _label_2d_numba(fg, offs):  # pragma: no cover - exercised via dispatcher
        nr, nc = fg.shape
        labels = np.zeros((nr, nc), dtype=np.int32)
        stack = np.empty(nr * nc, dtype=np.int64)
        nxt = 0
        for r in range(nr):
            for c in range(nc):
                if not fg[r, c] or labels[r, c] != 0:
                    continue
                nxt += 1
                labels[r, c] = nxt
                top = 0
                stack[top] = r * nc + c
                top += 1
                while top > 0:
                    top -= 1
                    flat = stack[top]
                    cc = flat % nc
                    cr = flat // nc
                    for k in range(offs.shape[0]):
                        tr = cr + offs[k, 0]
                        tc = cc + offs[k, 1]
                        if tr < 0 or tr >= nr or tc < 0 or tc >= nc:
                            continue
                        if fg[tr, tc] and labels[tr, tc] == 0:
                            labels[tr, tc] = nxt
                            stack[top] = tr * nc + tc
                            top += 1
        return labels


def _label_scipy(fg: np.ndarray, connectivity: int) -> np.ndarray:
    from scipy import ndimage

    if fg.ndim == 3:
        order = 1 if connectivity == 6 else 3
    else:
        order = 1 if connectivity == 4 else 2
    structure = ndimage.generate_binary_structure(fg.ndim, order)
    labels, _ = ndimage.label(fg, structure=structure)
    return labels.astype(np.int32, copy=False)


def _relabel_scan_order(labels: np.ndarray) -> np.ndarray:
    """Renumber components 1..k by first appearance in C scan order."""
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids != 0
    ids, first = ids[keep], first[keep]
    order = np.argsort(first, kind="stable")
    lut = np.zeros(int(labels.max()) + 1, dtype=np.int32)
    lut[ids[order]] = np.arange(1, ids.size + 1, dtype=np.int32)
    return lut[labels]


def label_components(fg: np.ndarray, connectivity: int) -> np.ndarray:
    """Label connected components of a boolean array, ids 1..k in scan order."""
    fg = np.ascontiguousarray(fg.astype(bool, copy=False))
    if fg.ndim == 3:
        if HAVE_NUMBA:
            raw = _label_3d_numba(fg, _offsets_3d(connectivity))
        else:
            _offsets_3d(connectivity)  # validate
            raw = _label_scipy(fg, connectivity)
    elif fg.ndim == 2:
        if HAVE_NUMBA:
            raw = _label_2d_numba(fg, _offsets_2d(connectivity))
        else:
            _offsets_2d(connectivity)
            raw = _label_scipy(fg, connectivity)
    else:
        raise ValueError("label_components expects a 2D or 3D array")
    # The numba floods already label in scan order, but canonicalize both
    # paths through the same relabeling so outputs match bit for bit.
    return _relabel_scan_order(raw)


def component_stats(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-label voxel counts and centroids (label ids 1..k).

    Returns (counts[k], centroids[k, ndim]); centroids are arithmetic means
    of voxel coordinates in index units.
    """
    k = int(labels.max())
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=k + 1)[1:]
    centroids = np.empty((k, labels.ndim), dtype=np.float64)
    for d in range(labels.ndim):
        shape = [1] * labels.ndim
        shape[d] = labels.shape[d]
        coord = np.arange(labels.shape[d], dtype=np.float64).reshape(shape)
        coord = np.broadcast_to(coord, labels.shape).ravel()
        sums = np.bincount(flat, weights=coord, minlength=k + 1)[1:]
        centroids[:, d] = sums / np.maximum(counts, 1)
    return counts.astype(np.int64), centroids


# ---------------------------------------------------------------------------
# Separable Gaussian blur
# ---------------------------------------------------------------------------

def gaussian_taps(sigma: float) -> np.ndarray:
    """Normalized Gaussian taps with truncation radius ceil(3*sigma)."""
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (xs / sigma) ** 2)
    return taps / taps.sum()


def _reflect_lut(n: int, radius: int) -> np.ndarray:
    """Index map of length n + 2*radius realizing half-sample reflection."""
    idx = np.arange(-radius, n + radius, dtype=np.int64)
    period = 2 * n
    m = np.mod(idx, period)
    return np.where(m >= n, period - 1 - m, m)


if HAVE_NUMBA:

    @njit(cache=True)
    def _convolve_last_numba(arr, taps, lut):  # pragma: no cover
        n0, n1 = arr.shape
        out = np.empty_like(arr)
        for i in range(n0):
            for j in range(n1):
                acc = 0.0
                for t in range(taps.shape[0]):
                    acc += taps[t] * arr[i, lut[j + t]]
                out[i, j] = acc
        return out


def _convolve_last_numpy(arr: np.ndarray, taps: np.ndarray, lut: np.ndarray) -> np.ndarray:
    n1 = arr.shape[-1]
    out = np.zeros_like(arr)
    for t in range(taps.shape[0]):
        out += taps[t] * arr[..., lut[t : t + n1]]
    return out


def blur_volume(data: np.ndarray, sigma: float) -> np.ndarray:
    """Separable 3D Gaussian blur with reflect padding; returns float64."""
    out = data.astype(np.float64)
    if sigma <= 0:
        return out
    taps = gaussian_taps(sigma)
    radius = (taps.shape[0] - 1) // 2
    for axis in (0, 1, 2):
        moved = np.ascontiguousarray(np.moveaxis(out, axis, -1))
        shape = moved.shape
        flat = moved.reshape(-1, shape[-1])
        lut = _reflect_lut(shape[-1], radius)
        if HAVE_NUMBA:
            flat = _convolve_last_numba(flat, taps, lut)
        else:
            flat = _convolve_last_numpy(flat, taps, lut)
        out = np.moveaxis(flat.reshape(shape), -1, axis)
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# Capsule rasterization
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _paint_capsule_numba(labels, p0, p1, radius_nm, vsize, value):  # pragma: no cover
        nz, ny, nx = labels.shape
        r2 = radius_nm * radius_nm
        rz = radius_nm / vsize[0]
        ry = radius_nm / vsize[1]
        rx = radius_nm / vsize[2]
        z0 = max(0, int(np.floor(min(p0[0], p1[0]) - rz - 1.0)))
        z1 = min(nz - 1, int(np.ceil(max(p0[0], p1[0]) + rz + 1.0)))
        y0 = max(0, int(np.floor(min(p0[1], p1[1]) - ry - 1.0)))
        y1 = min(ny - 1, int(np.ceil(max(p0[1], p1[1]) + ry + 1.0)))
        x0 = max(0, int(np.floor(min(p0[2], p1[2]) - rx - 1.0)))
        x1 = min(nx - 1, int(np.ceil(max(p0[2], p1[2]) + rx + 1.0)))
        az = p0[0] * vsize[0]
        ay = p0[1] * vsize[1]
        ax = p0[2] * vsize[2]
        vz = p1[0] * vsize[0] - az
        vy = p1[1] * vsize[1] - ay
        vx = p1[2] * vsize[2] - ax
        vv = vz * vz + vy * vy + vx * vx
        for z in range(z0, z1 + 1):
            for y in range(y0, y1 + 1):
                for x in range(x0, x1 + 1):
                    wz = z * vsize[0] - az
                    wy = y * vsize[1] - ay
                    wx = x * vsize[2] - ax
                    if vv > 0.0:
                        t = (wz * vz + wy * vy + wx * vx) / vv
                        if t < 0.0:
                            t = 0.0
                        elif t > 1.0:
                            t = 1.0
                    else:
                        t = 0.0
                    dz = wz - t * vz
                    dy = wy - t * vy
                    dx = wx - t * vx
                    if dz * dz + dy * dy + dx * dx <= r2:
                        if labels[z, y, x] == 0:
                            labels[z, y, x] = value


def _paint_capsule_numpy(labels, p0, p1, radius_nm, vsize, value):
    nz, ny, nx = labels.shape
    r2 = radius_nm * radius_nm
    lo = []
    hi = []
    for d, n in zip(range(3), (nz, ny, nx)):
        rd = radius_nm / vsize[d]
        lo.append(max(0, int(np.floor(min(p0[d], p1[d]) - rd - 1.0))))
        hi.append(min(n - 1, int(np.ceil(max(p0[d], p1[d]) + rd + 1.0))))
    a = np.array([p0[d] * vsize[d] for d in range(3)])
    v = np.array([p1[d] * vsize[d] for d in range(3)]) - a
    vv = float(v @ v)
    zz, yy, xx = np.meshgrid(
        np.arange(lo[0], hi[0] + 1, dtype=np.float64) * vsize[0],
        np.arange(lo[1], hi[1] + 1, dtype=np.float64) * vsize[1],
        np.arange(lo[2], hi[2] + 1, dtype=np.float64) * vsize[2],
        indexing="ij",
    )
    wz, wy, wx = zz - a[0], yy - a[1], xx - a[2]
    if vv > 0.0:
        t = np.clip((wz * v[0] + wy * v[1] + wx * v[2]) / vv, 0.0, 1.0)
    else:
        t = np.zeros_like(wz)
    dz = wz - t * v[0]
    dy = wy - t * v[1]
    dx = wx - t * v[2]
    inside = dz * dz + dy * dy + dx * dx <= r2
    region = labels[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1]
    region[inside & (region == 0)] = value


def paint_capsule(
    labels: np.ndarray,
    p0: np.ndarray,
    p1: np.ndarray,
    radius_nm: float,
    voxel_size_nm: np.ndarray,
    value: int,
) -> None:
    """Write `value` into every 0-voxel within radius_nm of segment p0-p1.

    Endpoints are in voxel coordinates; the distance test runs in physical
    space so tubes stay round under anisotropic voxels.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    vsize = np.asarray(voxel_size_nm, dtype=np.float64)
    if HAVE_NUMBA:
        _paint_capsule_numba(labels, p0, p1, float(radius_nm), vsize, value)
    else:
        _paint_capsule_numpy(labels, p0, p1, float(radius_nm), vsize, value)
