"""Command-line front end for the segmentation pipeline.

Exit codes: 0 success, 1 usage error, 2 runtime/backend error.
"""

from __future__ import annotations

import argparse
import json
import sys
import threading
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import color_threshold_baseline, iou_tracking_baseline
from .engine import EngineConfig, Seed, run
from .metrics import evaluate, format_table
from .seeding import SeedingConfig, generate_seeds
from .segmenter import (
    BackendError,
    ExternalSegmenter,
    OracleSegmenter,
    SegmenterBackend,
    ThresholdSegmenter,
)
from .synth import SynthSpec, generate
from .volume import (
    PlaneAxis,
    VolumeError,
    deflicker_z,
    load_labels,
    load_volume,
    save_labels,
    save_volume,
)


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="tubetrace", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic phantom volume")
    p.add_argument("spec", help="SynthSpec JSON file")
    p.add_argument("out_prefix", help="output prefix for .volj containers")
    p.add_argument("--rng-seed", type=int, default=None)

    p = sub.add_parser("seeds", help="generate initial seeds by thresholding")
    p.add_argument("volume")
    p.add_argument("--eta", type=float, default=98.0)
    p.add_argument("--min-voxels", type=int, default=50)
    p.add_argument("--out", default=None)

    p = sub.add_parser("segment", help="run the tri-plane tracking engine")
    p.add_argument("volume")
    p.add_argument("--backend", required=True, help="oracle:<gt.volj> | threshold | external:<cmd>")
    p.add_argument("--seeds", default="auto", help="seeds JSON file or 'auto'")
    p.add_argument("--config", default=None, help="engine config JSON file")
    p.add_argument("--out", default="pred.volj")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--log", default=None, help="write one JSON object per traversal event")
    p.add_argument("--deflicker-window", type=int, default=0, help="0 disables deflickering")
    p.add_argument("--eta", type=float, default=98.0)
    p.add_argument("--min-seed-voxels", type=int, default=50)
    p.add_argument("--k-sigma", type=float, default=1.5, help="threshold backend cutoff")
    p.add_argument("--shape-weight", action="store_true", help="threshold backend shape-aware confidence")
    p.add_argument("--single-plane", choices=["z", "y", "x"], default=None,
                   help="debug: restrict plane selection to one axis")
    p.add_argument("--no-turning-points", action="store_true", help="debug: disable recursive seeding")
    p.add_argument("--dense-reselect", action="store_true", help="debug: re-select the plane every step")
    p.add_argument("--rng-seed", type=int, default=0)

    p = sub.add_parser("baseline", help="run a zero-shot baseline")
    p.add_argument("method", choices=["color", "iou"])
    p.add_argument("volume")
    p.add_argument("--backend", default="threshold", help="backend for the iou method")
    p.add_argument("--out", default="baseline.volj")
    p.add_argument("--min-voxels", type=int, default=1000)
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--k-sigma", type=float, default=1.5)
    p.add_argument("--shape-weight", action="store_true")

    p = sub.add_parser("eval", help="instance-level evaluation")
    p.add_argument("gt")
    p.add_argument("pred")
    p.add_argument("--largest-only", action="store_true")
    p.add_argument("--match-threshold", type=float, default=0.0)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("deflicker", help="normalize per-slice intensity drift")
    p.add_argument("volume")
    p.add_argument("out")
    p.add_argument("--window", type=int, default=11)
    return parser


def _make_backend(spec: str, args) -> tuple[SegmenterBackend, bool]:
    """Returns (backend, needs_sessions). External backends need one
    session per worker thread."""
    if spec.startswith("oracle:"):
        return OracleSegmenter(load_labels(spec.split(":", 1)[1])), False
    if spec == "threshold":
        k = getattr(args, "k_sigma", 1.5)
        shape_weight = getattr(args, "shape_weight", False)
        return ThresholdSegmenter(k_sigma=k, shape_weight=shape_weight), False
    if spec.startswith("external:"):
        return ExternalSegmenter(spec.split(":", 1)[1]), True
    raise ValueError(f"unknown backend spec {spec!r}")


def _load_seeds(path: str) -> list[Seed]:
    data = json.loads(Path(path).read_text())
    return [Seed(tuple(int(v) for v in triple)) for triple in data]


def _cmd_synth(args) -> int:
    spec = SynthSpec.from_json_file(args.spec)
    if args.rng_seed is not None:
        spec.rng_seed = args.rng_seed
    vol, gt, seeds = generate(spec)
    prefix = Path(args.out_prefix)
    vol_path = save_volume(vol, prefix.with_name(prefix.name + ".volj"))
    gt_path = save_labels(gt, prefix.with_name(prefix.name + "_gt.volj"))
    seeds_path = prefix.with_name(prefix.name + "_seeds.json")
    seeds_path.write_text(json.dumps([list(s.pos) for s in seeds]) + "\n")
    print(f"wrote {vol_path} {gt_path} {seeds_path}")
    return 0


def _cmd_seeds(args) -> int:
    vol = load_volume(args.volume)
    cfg = SeedingConfig(eta_percentile=args.eta, min_component_voxels=args.min_voxels)
    seeds = generate_seeds(vol, cfg)
    payload = json.dumps([list(s.pos) for s in seeds]) + "\n"
    if args.out:
        Path(args.out).write_text(payload)
        print(f"wrote {len(seeds)} seeds to {args.out}")
    else:
        sys.stdout.write(payload)
    return 0


def _cmd_segment(args) -> int:
    vol = load_volume(args.volume)
    if args.deflicker_window:
        vol = deflicker_z(vol, args.deflicker_window)
    if args.seeds == "auto":
        seeds = generate_seeds(
            vol, SeedingConfig(eta_percentile=args.eta, min_component_voxels=args.min_seed_voxels)
        )
    else:
        seeds = _load_seeds(args.seeds)
    cfg = EngineConfig.from_json_file(args.config) if args.config else EngineConfig()
    if args.single_plane:
        cfg.restrict_axes = (PlaneAxis.from_name(args.single_plane),)
    if args.no_turning_points:
        cfg.turning_points = False
    if args.dense_reselect:
        cfg.dense_reselect = True

    backend, needs_sessions = _make_backend(args.backend, args)
    sessions = [backend]
    factory = None
    if needs_sessions and args.workers > 1:
        local = threading.local()

        def factory():
            if not hasattr(local, "backend"):
                local.backend = ExternalSegmenter(args.backend.split(":", 1)[1])
                sessions.append(local.backend)
            return local.backend

    log_handle = open(args.log, "w") if args.log else None

    def on_event(payload: dict) -> None:
        if log_handle:
            log_handle.write(json.dumps(payload) + "\n")

    try:
        pred = run(
            vol,
            seeds,
            backend,
            cfg,
            workers=args.workers,
            backend_factory=factory,
            on_event=on_event if log_handle else None,
        )
    finally:
        if log_handle:
            log_handle.close()
        for session in sessions:
            if isinstance(session, ExternalSegmenter):
                session.close()
    out = save_labels(pred, Path(args.out))
    n_instances = int(np.unique(pred.labels[pred.labels > 0]).size)
    n_voxels = int((pred.labels > 0).sum())
    print(f"wrote {out}: {n_instances} instance(s), {n_voxels} voxel(s)")
    return 0


def _cmd_baseline(args) -> int:
    vol = load_volume(args.volume)
    if args.method == "color":
        pred = color_threshold_baseline(vol, min_voxels=args.min_voxels)
    else:
        backend, _ = _make_backend(args.backend, args)
        try:
            pred = iou_tracking_baseline(vol, backend, iou_threshold=args.iou_threshold)
        finally:
            if isinstance(backend, ExternalSegmenter):
                backend.close()
    out = save_labels(pred, Path(args.out))
    n_instances = int(np.unique(pred.labels[pred.labels > 0]).size)
    print(f"wrote {out}: {n_instances} instance(s)")
    return 0


def _cmd_eval(args) -> int:
    gt = load_labels(args.gt)
    pred = load_labels(args.pred)
    report = evaluate(
        gt, pred, match_threshold=args.match_threshold, largest_only=args.largest_only
    )
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(format_table(report))
        if args.largest_only:
            print(
                f"voxel: Pre {100 * report.voxel_precision:.2f} "
                f"Rec {100 * report.voxel_recall:.2f} "
                f"Acc {100 * report.voxel_accuracy:.2f}"
            )
    return 0


def _cmd_deflicker(args) -> int:
    vol = load_volume(args.volume)
    out = save_volume(deflicker_z(vol, args.window), Path(args.out))
    print(f"wrote {out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "seeds": _cmd_seeds,
    "segment": _cmd_segment,
    "baseline": _cmd_baseline,
    "eval": _cmd_eval,
    "deflicker": _cmd_deflicker,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (VolumeError, BackendError, ValueError, OSError) as exc:
        print(f"tubetrace: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
