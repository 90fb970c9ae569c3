"""Pluggable 2D promptable-segmentation backends and mask post-processing.

A backend answers point(+box) prompts on a single plane with a binary mask
and a confidence in [0, 1]. Three backends ship in-process (ground-truth
oracle, intensity thresholding, and a subprocess client speaking a
line-delimited JSON protocol); anything else can be plugged in by matching
the same small interface.
"""

from __future__ import annotations

import base64
import json
import os
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import rle as rle_codec
from ._kernels import label_components
from .volume import (
    Image2D,
    LabelVolume,
    Mask2D,
    PlaneAxis,
    fill_holes_2d,
    remove_small_components_mask,
)

DEFAULT_TIMEOUT_SECS = 30.0
TIMEOUT_ENV_VAR = "TUBETRACE_BACKEND_TIMEOUT_SECS"



class BackendError(Exception):
    """Backend failure: process death, timeout, or reported error."""


class ProtocolError(BackendError):
    """The external backend violated the wire protocol."""


@dataclass(frozen=True)
class Prompt:
    """Point prompt with an optional (row, col, height, width) box."""

    point: tuple[int, int]
    box: Optional[tuple[int, int, int, int]] = None


@dataclass(frozen=True)
class SegmentResult2D:
    mask: Mask2D
    probability: float

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must be in [0, 1], got {self.probability}")


class SegmenterBackend:
    """Interface contract; subclasses fill in raw segmentation calls."""

    capabilities: frozenset[str] = frozenset()

    def segment(self, image: Image2D, prompt: Prompt) -> SegmentResult2D:
        raise NotImplementedError

    def auto_masks(self, image: Image2D) -> list[SegmentResult2D]:
        raise NotImplementedError

    def restrict_window(
        self, lo: tuple[int, int, int], hi: tuple[int, int, int]
    ) -> "SegmenterBackend":
        """View of this backend scoped to a sub-volume window.

        Chunked runs extract planes from sub-volumes; backends that locate
        planes by provenance (the oracle) must re-frame accordingly. The
        default is a no-op because most backends only see pixels.
        """
        return self


def _validate_prompt(image: Image2D, prompt: Prompt) -> None:
    rows, cols = image.shape
    r, c = prompt.point
    if not (0 <= r < rows and 0 <= c < cols):
        raise ValueError(f"prompt point {prompt.point} outside image of shape {image.shape}")
    if prompt.box is not None:
        br, bc, bh, bw = prompt.box
        if bh <= 0 or bw <= 0 or br + bh <= 0 or bc + bw <= 0 or br >= rows or bc >= cols:
            raise ValueError(f"prompt box {prompt.box} does not intersect image {image.shape}")


def _check_result(image: Image2D, result: SegmentResult2D) -> None:
    if result.mask.shape != image.shape:
        raise BackendError(
            f"backend mask shape {result.mask.shape} does not match image {image.shape}"
        )


def postprocess_mask(mask: Mask2D, min_px: int, keep_point: Optional[tuple[int, int]] = None) -> Mask2D:
    """Fill holes, drop small components, and optionally isolate one blob.

    When keep_point is given, only the component containing it survives
    (tracking needs a single blob); if cleanup removed that component the
    result is empty.
    """
    out = fill_holes_2d(mask)
    out = remove_small_components_mask(out, min_px)
    if keep_point is not None and not out.is_empty():
        r, c = keep_point
        if not out.bits[r, c]:
            return Mask2D(bits=np.zeros(out.shape, dtype=bool))
        comps = label_components(out.bits, 8)
        out = Mask2D(bits=comps == comps[r, c])
    return out


def segment(
    backend: SegmenterBackend, image: Image2D, prompt: Prompt, min_px: int = 10
) -> SegmentResult2D:
    """Run one prompted segmentation and post-process the mask."""
    _validate_prompt(image, prompt)
    raw = backend.segment(image, prompt)
    _check_result(image, raw)
    mask = postprocess_mask(raw.mask, min_px, keep_point=prompt.point)
    return SegmentResult2D(mask=mask, probability=raw.probability)


def _first_pixel(bits: np.ndarray) -> tuple[int, int]:
    flat = int(np.flatnonzero(bits.ravel())[0])
    return divmod(flat, bits.shape[1])


def auto_masks(backend: SegmenterBackend, image: Image2D, min_px: int = 10) -> list[SegmentResult2D]:
    """All masks a backend proposes for a plane, deterministically ordered.

    Order: descending area, ties broken by topmost-leftmost set pixel.
    Masks emptied by post-processing are dropped.
    """
    if "auto" not in backend.capabilities:
        raise BackendError(f"{type(backend).__name__} does not support automatic mask generation")
    results = []
    for raw in backend.auto_masks(image):
        _check_result(image, raw)
        mask = postprocess_mask(raw.mask, min_px)
        if not mask.is_empty():
            results.append(SegmentResult2D(mask=mask, probability=raw.probability))
    return sorted(results, key=lambda r: (-r.mask.area_px, _first_pixel(r.mask.bits)))


# ---------------------------------------------------------------------------
# Ground-truth oracle backend
# ---------------------------------------------------------------------------

def _slice_labels(labels: np.ndarray, axis: PlaneAxis, index: int) -> np.ndarray:
    if axis == PlaneAxis.Z:
        return labels[index, :, :]
    if axis == PlaneAxis.Y:
        return labels[:, index, :]
    return labels[:, :, index]


def oracle_segment(gt: LabelVolume, axis: PlaneAxis, index: int, prompt: Prompt) -> SegmentResult2D:
    """Return the 2D 8-connected nonzero component containing the prompt.

    Nonzero pixels of any instance id count as foreground, so instances
    touching within the plane merge. Probability is 1 for a hit, 0 for a
    background prompt.
    """
    plane = _slice_labels(gt.labels, axis, index)
    r, c = prompt.point
    comps = label_components(plane > 0, 8)
    cid = comps[r, c]
    if cid == 0:
        return SegmentResult2D(mask=Mask2D(bits=np.zeros(plane.shape, dtype=bool)), probability=0.0)
    return SegmentResult2D(mask=Mask2D(bits=comps == cid), probability=1.0)


class OracleSegmenter(SegmenterBackend):
    """Answers prompts from a ground-truth labeling; the plane is located
    via Image2D.origin, so it only works on planes extracted from the
    paired volume."""

    capabilities = frozenset({"segment", "auto"})

    def __init__(self, gt: LabelVolume):
        self.gt = gt

    def segment(self, image: Image2D, prompt: Prompt) -> SegmentResult2D:
        if image.origin is None:
            raise BackendError("oracle backend requires images with plane provenance")
        axis, index = image.origin
        return oracle_segment(self.gt, axis, index, prompt)

    def auto_masks(self, image: Image2D) -> list[SegmentResult2D]:
        if image.origin is None:
            raise BackendError("oracle backend requires images with plane provenance")
        axis, index = image.origin
        plane = _slice_labels(self.gt.labels, axis, index)
        comps = label_components(plane > 0, 8)
        out = []
        for cid in range(1, int(comps.max()) + 1):
            out.append(SegmentResult2D(mask=Mask2D(bits=comps == cid), probability=1.0))
        return out

    def restrict_window(self, lo, hi):
        cropped = np.ascontiguousarray(
            self.gt.labels[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
        )
        return OracleSegmenter(LabelVolume(labels=cropped, voxel_size_nm=self.gt.voxel_size_nm))


# ---------------------------------------------------------------------------
# Built-in thresholding backend
# ---------------------------------------------------------------------------

def _contrast_probability(image: Image2D, bits: np.ndarray) -> float:
    """Boundary contrast of a blob: (inside mean - ring mean) / image std."""
    data = image.data.astype(np.float64)
    std = float(data.std())
    inside = float(data[bits].mean())
    padded = np.pad(bits, 1, mode="constant")
    dilated = np.zeros_like(padded)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            dilated |= np.roll(np.roll(padded, dr, axis=0), dc, axis=1)
    ring = dilated[1:-1, 1:-1] & ~bits
    if not ring.any():
        return 1.0
    outside = float(data[ring].mean())
    score = (inside - outside) / (std + 1e-6)
    return float(np.clip(score, 0.0, 1.0))


def _compactness(bits: np.ndarray) -> float:
    """Isoperimetric score 4*pi*A/B^2 with B = boundary pixel count
    (pixels with an off-mask 4-neighbor; the image border counts as off).
    Rasterized disks score >= 1, elongated bars fall well below."""
    area = int(bits.sum())
    padded = np.pad(bits, 1, mode="constant")
    boundary = np.zeros_like(padded)
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        boundary |= padded & ~np.roll(np.roll(padded, dr, axis=0), dc, axis=1)
    b = int(boundary.sum())
    if b == 0:
        return 1.0
    q = 4.0 * np.pi * area / float(b) ** 2
    return float(min(1.0, q))


def threshold_segment(
    image: Image2D, prompt: Prompt, k_sigma: float = 1.5, shape_weight: bool = False
) -> SegmentResult2D:
    """Segment the blob of bright pixels (> mean + k_sigma*std) under the
    prompt point; confidence is the boundary-contrast score, optionally
    down-weighted by the blob's compactness."""
    data = image.data.astype(np.float64)
    cutoff = data.mean() + k_sigma * data.std()
    fg = data > cutoff
    r, c = prompt.point
    empty = Mask2D(bits=np.zeros(image.shape, dtype=bool))
    if not fg[r, c]:
        return SegmentResult2D(mask=empty, probability=0.0)
    comps = label_components(fg, 8)
    bits = comps == comps[r, c]
    prob = _contrast_probability(image, bits)
    if shape_weight:
        prob *= _compactness(bits)
    return SegmentResult2D(mask=Mask2D(bits=bits), probability=prob)


class ThresholdSegmenter(SegmenterBackend):
    """Zero-dependency backend: global intensity threshold per plane.

    With shape_weight=True the confidence also penalizes non-compact
    blobs, mimicking a learned segmenter's preference for natural
    cross-sections over elongated silhouettes.
    """

    capabilities = frozenset({"segment", "auto"})

    def __init__(self, k_sigma: float = 1.5, shape_weight: bool = False):
        self.k_sigma = k_sigma
        self.shape_weight = shape_weight

    def segment(self, image: Image2D, prompt: Prompt) -> SegmentResult2D:
        return threshold_segment(image, prompt, self.k_sigma, self.shape_weight)

    def auto_masks(self, image: Image2D) -> list[SegmentResult2D]:
        data = image.data.astype(np.float64)
        cutoff = data.mean() + self.k_sigma * data.std()
        comps = label_components(data > cutoff, 8)
        out = []
        for cid in range(1, int(comps.max()) + 1):
            bits = comps == cid
            prob = _contrast_probability(image, bits)
            if self.shape_weight:
                prob *= _compactness(bits)
            out.append(SegmentResult2D(mask=Mask2D(bits=bits), probability=prob))
        return out


# ---------------------------------------------------------------------------
# External subprocess backend
# ---------------------------------------------------------------------------

def _encode_image(image: Image2D) -> dict:
    data = image.data
    if data.dtype == np.uint16:
        lo, hi = int(data.min()), int(data.max())
        if hi > lo:
            data = np.rint((data.astype(np.float64) - lo) * (255.0 / (hi - lo))).astype(np.uint8)
        else:
            data = np.zeros(data.shape, dtype=np.uint8)
    payload = base64.b64encode(np.ascontiguousarray(data).tobytes()).decode("ascii")
    return {"rows": data.shape[0], "cols": data.shape[1], "b64": payload}


def _encode_prompt(prompt: Prompt) -> dict:
    return {
        "point": [int(prompt.point[0]), int(prompt.point[1])],
        "box": None if prompt.box is None else [int(v) for v in prompt.box],
    }


class ExternalSegmenter(SegmenterBackend):
    """Client for a segmentation server child process.

    One JSON object per line on the child's stdin/stdout; one in-flight
    request per session. Requests time out after DEFAULT_TIMEOUT_SECS
    unless overridden by the constructor or TUBETRACE_BACKEND_TIMEOUT_SECS.
    """

    def __init__(
        self,
        command: str | Sequence[str],
        config: Optional[dict] = None,
        timeout_secs: Optional[float] = None,
    ):
        if timeout_secs is None:
            env = os.environ.get(TIMEOUT_ENV_VAR)
            timeout_secs = float(env) if env else DEFAULT_TIMEOUT_SECS
        self.timeout_secs = timeout_secs
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self._proc = subprocess.Popen(
            argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()
        self._next_id = 0
        self._closed = False
        reply = self._request({"op": "init", "config": config or {}})
        if not reply.get("ok"):
            raise ProtocolError(f"init rejected: {reply!r}")
        caps = reply.get("capabilities", [])
        mapping = {"segment": "segment", "auto": "auto"}
        self.capabilities = frozenset(mapping[c] for c in caps if c in mapping)

    def _pump(self):
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _request(self, payload: dict) -> dict:
        if self._closed:
            raise BackendError("session is closed")
        self._next_id += 1
        payload = {"id": self._next_id, **payload}
        assert self._proc.stdin is not None
        try:
            self._proc.stdin.write(json.dumps(payload) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, ValueError) as exc:
            raise BackendError(f"backend process is gone: {exc}") from exc
        try:
            line = self._lines.get(timeout=self.timeout_secs)
        except queue.Empty:
            raise BackendError(f"backend request timed out after {self.timeout_secs}s") from None
        if line is None:
            code = self._proc.poll()
            raise BackendError(f"backend process exited (code {code}) mid-request")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"unparseable backend reply: {line!r}") from exc
        if not isinstance(reply, dict) or reply.get("id") != self._next_id:
            raise ProtocolError(f"reply id mismatch: sent {self._next_id}, got {reply!r}")
        if "error" in reply:
            raise BackendError(f"backend error: {reply['error']}")
        return reply

    def _decode_mask(self, image: Image2D, obj: dict) -> Mask2D:
        if not isinstance(obj, dict):
            raise ProtocolError(f"mask must be an object, got {obj!r}")
        rows, cols = obj.get("rows"), obj.get("cols")
        if (rows, cols) != image.shape:
            raise ProtocolError(f"mask shape {(rows, cols)} does not match image {image.shape}")
        try:
            bits = rle_codec.decode(obj.get("rle", []), rows, cols)
        except rle_codec.RLEError as exc:
            raise ProtocolError(str(exc)) from exc
        return Mask2D(bits=bits)

    @staticmethod
    def _decode_prob(value) -> float:
        prob = float(value)
        if not 0.0 <= prob <= 1.0:
            raise ProtocolError(f"probability {prob} outside [0, 1]")
        return prob

    def segment(self, image: Image2D, prompt: Prompt) -> SegmentResult2D:
        req = {"op": "segment", "image": _encode_image(image), "prompt": _encode_prompt(prompt)}
        if image.origin is not None:
            # Optional extension: lets slice-aware servers (e.g. oracle mode)
            # locate the plane; conforming servers may ignore it.
            axis, index = image.origin
            req["origin"] = [axis.label, int(index)]
        reply = self._request(req)
        if "mask" not in reply or "prob" not in reply:
            raise ProtocolError(f"segment reply missing mask/prob: {reply!r}")
        return SegmentResult2D(
            mask=self._decode_mask(image, reply["mask"]),
            probability=self._decode_prob(reply["prob"]),
        )

    def auto_masks(self, image: Image2D) -> list[SegmentResult2D]:
        req = {"op": "auto", "image": _encode_image(image)}
        if image.origin is not None:
            axis, index = image.origin
            req["origin"] = [axis.label, int(index)]
        reply = self._request(req)
        if "masks" not in reply or not isinstance(reply["masks"], list):
            raise ProtocolError(f"auto reply missing masks: {reply!r}")
        out = []
        for entry in reply["masks"]:
            out.append(
                SegmentResult2D(
                    mask=self._decode_mask(image, entry.get("mask")),
                    probability=self._decode_prob(entry.get("prob")),
                )
            )
        return out

    def close(self):
        if self._closed:
            return
        self._closed = True
        try:
            if self._proc.poll() is None and self._proc.stdin is not None:
                self._next_id += 1
                self._proc.stdin.write(json.dumps({"id": self._next_id, "op": "shutdown"}) + "\n")
                self._proc.stdin.flush()
                self._proc.wait(timeout=2.0)
        except (OSError, ValueError, subprocess.TimeoutExpired):
            pass
        finally:
            if self._proc.poll() is None:
                self._proc.terminate()
                try:
                    self._proc.wait(timeout=2.0)
                except subprocess.TimeoutExpired:
                    self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def external_segment(proc: ExternalSegmenter, image: Image2D, prompt: Prompt) -> SegmentResult2D:
    """Prompted segmentation over the wire (raw, no post-processing)."""
    return proc.segment(image, prompt)
