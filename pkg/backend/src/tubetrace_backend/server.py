"""Segmentation server: one JSON object per line on stdin/stdout.

Requests carry strictly increasing integer ids. Malformed input never
kills the process; it is answered with an error object. Supported models:

  echo            returns the prompt box filled, confidence 0.9
  oracle:<volj>   serves 8-connected nonzero components of a label volume;
                  the plane is located via the optional request "origin"
                  field or by matching the image bytes against the volume's
                  slices
  sam|mobilesam   wraps a promptable segmentation checkpoint (requires the
                  [sam] extra and model weights)
"""

from __future__ import annotations

import argparse
import base64
import hashlib
import json
import sys

import numpy as np

from . import rle, volio

_AXES = {"z": 0, "y": 1, "x": 2}


class RequestError(Exception):
    """Answered with an error object; the server keeps running."""


def _decode_image(obj) -> np.ndarray:
    if not isinstance(obj, dict):
        raise RequestError("image must be an object")
    try:
        rows, cols = int(obj["rows"]), int(obj["cols"])
        raw = base64.b64decode(obj["b64"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise RequestError(f"bad image payload: {exc}") from exc
    if rows < 1 or cols < 1 or len(raw) != rows * cols:
        raise RequestError(f"image payload is {len(raw)} bytes, expected {rows * cols}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(rows, cols)


def _decode_prompt(obj, shape) -> tuple[tuple[int, int], tuple[int, int, int, int] | None]:
    if not isinstance(obj, dict) or "point" not in obj:
        raise RequestError("prompt must carry a point")
    try:
        r, c = (int(v) for v in obj["point"])
    except (TypeError, ValueError) as exc:
        raise RequestError(f"bad prompt point: {exc}") from exc
    if not (0 <= r < shape[0] and 0 <= c < shape[1]):
        raise RequestError(f"prompt point {(r, c)} outside image {shape}")
    box = obj.get("box")
    if box is not None:
        try:
            box = tuple(int(v) for v in box)
        except (TypeError, ValueError) as exc:
            raise RequestError(f"bad prompt box: {exc}") from exc
        if len(box) != 4:
            raise RequestError("prompt box must have 4 entries")
    return (r, c), box


def _mask_payload(bits: np.ndarray) -> dict:
    return {"rows": int(bits.shape[0]), "cols": int(bits.shape[1]), "rle": rle.encode(bits)}


def _label8(binary: np.ndarray):
    from scipy import ndimage

    return ndimage.label(binary, structure=np.ones((3, 3), dtype=bool))


class EchoModel:
    def segment(self, image, point, box, origin):
        bits = np.zeros(image.shape, dtype=bool)
        if box is not None:
            r, c, h, w = box
            bits[max(0, r) : max(0, r + h), max(0, c) : max(0, c + w)] = True
        else:
            bits[point] = True
        return bits, 0.9

    def auto(self, image, origin):
        return [(np.ones(image.shape, dtype=bool), 0.9)]


class OracleModel:
    """Ground-truth components. Requests normally carry an "origin" hint;
    without one the plane is identified by its u8-encoded bytes."""

    def __init__(self, gt_path: str):
        self.labels = volio.load(gt_path)
        if self.labels.ndim != 3:
            raise ValueError("oracle volume must be 3D")
        self._slice_index: dict[bytes, tuple[int, int]] = {}
        for axis in range(3):
            for idx in range(self.labels.shape[axis]):
                plane = self._plane(axis, idx).astype(np.uint8)
                key = hashlib.md5(plane.tobytes()).digest() + bytes(
                    [plane.shape[0] % 251, plane.shape[1] % 251]
                )
                self._slice_index.setdefault(key, (axis, idx))

    def _plane(self, axis: int, idx: int) -> np.ndarray:
        if axis == 0:
            return self.labels[idx, :, :]
        if axis == 1:
            return self.labels[:, idx, :]
        return self.labels[:, :, idx]

    def _locate(self, image: np.ndarray, origin) -> np.ndarray:
        if origin is not None:
            try:
                axis = _AXES[str(origin[0]).lower()]
                idx = int(origin[1])
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise RequestError(f"bad origin {origin!r}: {exc}") from exc
            if not 0 <= idx < self.labels.shape[axis]:
                raise RequestError(f"origin index {idx} out of range")
            plane = self._plane(axis, idx)
            if plane.shape != image.shape:
                raise RequestError(
                    f"origin plane shape {plane.shape} does not match image {image.shape}"
                )
            return plane
        key = hashlib.md5(np.ascontiguousarray(image).tobytes()).digest() + bytes(
            [image.shape[0] % 251, image.shape[1] % 251]
        )
        hit = self._slice_index.get(key)
        if hit is None:
            raise RequestError("image does not match any slice of the oracle volume")
        return self._plane(*hit)

    def segment(self, image, point, box, origin):
        plane = self._locate(image, origin)
        comps, _ = _label8(plane > 0)
        cid = comps[point]
        if cid == 0:
            return np.zeros(image.shape, dtype=bool), 0.0
        return comps == cid, 1.0

    def auto(self, image, origin):
        plane = self._locate(image, origin)
        comps, count = _label8(plane > 0)
        return [(comps == cid, 1.0) for cid in range(1, count + 1)]


class SamModel:
    """Adapter over a promptable segmentation checkpoint.

    Grayscale input is replicated to three channels; point and box prompts
    are passed jointly; of the multi-mask output the highest-scoring mask
    wins and its score is reported as the confidence.
    """

    def __init__(self, variant: str):
        try:
            import torch
            from mobile_sam import SamAutomaticMaskGenerator, SamPredictor, sam_model_registry
        except ImportError as exc:  # pragma: no cover - needs the [sam] extra
            raise RuntimeError(
                f"model '{variant}' needs the [sam] extra (torch + mobile_sam): {exc}"
            ) from exc
        torch.manual_seed(0)
        model_type = "vit_t" if variant == "mobilesam" else "vit_h"
        sam = sam_model_registry[model_type]()
        sam.eval()
        self._predictor = SamPredictor(sam)
        self._auto = SamAutomaticMaskGenerator(sam)

    def segment(self, image, point, box, origin):  # pragma: no cover - needs weights
        rgb = np.repeat(image[:, :, None], 3, axis=2)
        self._predictor.set_image(rgb)
        coords = np.array([[point[1], point[0]]], dtype=np.float64)
        labels = np.ones(1, dtype=np.int64)
        sam_box = None
        if box is not None:
            r, c, h, w = box
            sam_box = np.array([c, r, c + w, r + h], dtype=np.float64)
        masks, scores, _ = self._predictor.predict(
            point_coords=coords, point_labels=labels, box=sam_box, multimask_output=True
        )
        best = int(np.argmax(scores))
        return masks[best].astype(bool), float(np.clip(scores[best], 0.0, 1.0))

    def auto(self, image, origin):  # pragma: no cover - needs weights
        rgb = np.repeat(image[:, :, None], 3, axis=2)
        out = []
        for entry in self._auto.generate(rgb):
            out.append((entry["segmentation"].astype(bool), float(np.clip(entry.get("stability_score", 1.0), 0.0, 1.0))))
        return out


def build_model(spec: str):
    if spec == "echo":
        return EchoModel()
    if spec.startswith("oracle:"):
        return OracleModel(spec.split(":", 1)[1])
    if spec in ("sam", "mobilesam"):
        return SamModel(spec)
    raise ValueError(f"unknown model {spec!r}")


class Server:
    def __init__(self, model):
        self.model = model
        self.last_id = 0

    def handle(self, line: str) -> tuple[str | None, bool]:
        """Returns (reply json or None, shutdown flag)."""
        try:
            req = json.loads(line)
        except json.JSONDecodeError as exc:
            return json.dumps({"id": -1, "error": f"unparseable request: {exc}"}), False
        if not isinstance(req, dict):
            return json.dumps({"id": -1, "error": "request must be an object"}), False
        rid = req.get("id")
        if not isinstance(rid, int):
            return json.dumps({"id": -1, "error": "request id must be an integer"}), False
        if rid <= self.last_id:
            return json.dumps({"id": rid, "error": "request ids must strictly increase"}), False
        self.last_id = rid
        try:
            return self._dispatch(rid, req)
        except RequestError as exc:
            return json.dumps({"id": rid, "error": str(exc)}), False
        except Exception as exc:  # never crash on a request
            return json.dumps({"id": rid, "error": f"internal error: {exc}"}), False

    def _dispatch(self, rid: int, req: dict) -> tuple[str, bool]:
        op = req.get("op")
        if op == "init":
            return json.dumps({"id": rid, "ok": True, "capabilities": ["segment", "auto"]}), False
        if op == "shutdown":
            return json.dumps({"id": rid, "ok": True}), True
        if op == "segment":
            image = _decode_image(req.get("image"))
            point, box = _decode_prompt(req.get("prompt"), image.shape)
            bits, prob = self.model.segment(image, point, box, req.get("origin"))
            return json.dumps({"id": rid, "mask": _mask_payload(bits), "prob": prob}), False
        if op == "auto":
            image = _decode_image(req.get("image"))
            masks = self.model.auto(image, req.get("origin"))
            payload = [{"mask": _mask_payload(bits), "prob": prob} for bits, prob in masks]
            return json.dumps({"id": rid, "masks": payload}), False
        raise RequestError(f"unknown op {op!r}")


def serve(model_spec: str, stdin=None, stdout=None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    try:
        server = Server(build_model(model_spec))
    except Exception as exc:
        print(f"tubetrace-backend: {exc}", file=sys.stderr)
        return 2
    for line in stdin:
        if not line.strip():
            continue
        reply, shutdown = server.handle(line)
        if reply is not None:
            stdout.write(reply + "\n")
            stdout.flush()
        if shutdown:
            break
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tubetrace-backend", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("serve", help="answer protocol requests on stdin/stdout")
    p.add_argument("--model", required=True, help="echo | oracle:<gt.volj> | sam | mobilesam")
    args = parser.parse_args(argv)
    return serve(args.model)


if __name__ == "__main__":
    sys.exit(main())
