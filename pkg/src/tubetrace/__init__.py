"""Zero-shot 3D tubular-structure segmentation by tri-plane tracking."""

__version__ = "0.1.0"

from .volume import (
    Image2D,
    LabelVolume,
    Mask2D,
    PlaneAxis,
    Volume3D,
    VolumeError,
    connected_components,
    deflicker_z,
    extract_plane,
    fill_holes_2d,
    gaussian_blur3d,
    load_labels,
    load_volume,
    percentile_threshold,
    remove_small_components,
    remove_small_components_mask,
    save_labels,
    save_volume,
)
from .segmenter import (
    BackendError,
    ExternalSegmenter,
    OracleSegmenter,
    Prompt,
    ProtocolError,
    SegmenterBackend,
    SegmentResult2D,
    ThresholdSegmenter,
    auto_masks,
    oracle_segment,
    postprocess_mask,
    segment,
    threshold_segment,
)
from .engine import (
    EngineConfig,
    Seed,
    TrackedSegment,
    VisitedSet,
    fps,
    make_prompt,
    plane_select,
    run,
    sample_turning_points,
    track,
    traverse,
)
from .seeding import SeedingConfig, generate_seeds
from .metrics import EvalReport, OverlapMatrix, evaluate, hungarian, overlap_matrix
from .baselines import color_threshold_baseline, iou_tracking_baseline
from .synth import SynthSpec, generate

__all__ = [name for name in dir() if not name.startswith("_")]
