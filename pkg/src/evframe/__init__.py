"""Event-frame fusion toolkit.

Simulation of threshold-crossing events, voxel-grid rasterization, cross
modal feature fusion with hand-derived gradients, homographic frame/event
alignment, an anchor-based detection head, a 15-type image corruption
benchmark, and COCO-style robustness metrics. Pure numpy/scipy, no deep
learning framework required.
"""

from .errors import (
    DomainError,
    EvframeError,
    FormatError,
    ParseError,
    SchemaError,
    ShapeError,
    StateError,
    ValidationError,
)
from .formats_io import (
    CameraRig,
    DetectionRecord,
    Event,
    EventStream,
    ImagePNM,
    decode_detections,
    decode_events,
    decode_image,
    decode_tensor,
    encode_calibration,
    encode_detections,
    encode_events,
    encode_image,
    encode_tensor,
    parse_calibration,
    read_tensor,
    read_tensor_bundle,
    write_tensor,
    write_tensor_bundle,
)
from .event_core import (
    SimConfig,
    VoxelGrid,
    build_voxel_grid,
    modality_dropout,
    normalize_timestamps,
    simulate_events,
)
from .geometry_align import (
    Homography,
    compose_homography,
    warp_bbox,
    warp_image,
    warp_point,
    warp_points,
)
from .fusion_cafr import (
    CafrGradients,
    CafrWeights,
    FeaturePair,
    bci_activate,
    bci_enhance,
    cafr_backward,
    cafr_forward,
    cafr_gradcheck,
    cross_self_attention,
    init_cafr_weights,
    load_cafr_weights,
    save_cafr_weights,
    tafr_refine,
)
from .detect_head import (
    Anchor,
    BBox,
    FeaturePyramid,
    HeadConfig,
    OffsetVector,
    build_fpn,
    decode_head,
    decode_offsets,
    encode_offsets,
    gen_anchors,
    gen_pyramid_anchors,
    head_forward,
    init_fpn_weights,
    init_head_weights,
    load_fpn_weights,
    load_head_weights,
    nms,
    save_fpn_weights,
    save_head_weights,
)
from .eval_metrics import (
    MapResult,
    MpcReport,
    average_precision,
    build_mpc_report,
    iou_tlwh,
    map_coco,
    match_detections,
    mpc,
    rpc,
)
from .corruption_bench import (
    CorruptionSpec,
    CorruptionType,
    apply_corruption,
    corrupt_dataset,
    corruption_seed,
    psnr,
    severity_params,
)
from .demo import PipelineResult, run_pipeline_demo

__version__ = "0.1.0"

__all__ = [
    "Anchor",
    "BBox",
    "CafrGradients",
    "CafrWeights",
    "CameraRig",
    "CorruptionSpec",
    "CorruptionType",
    "DetectionRecord",
    "DomainError",
    "Event",
    "EventStream",
    "EvframeError",
    "FeaturePair",
    "FeaturePyramid",
    "FormatError",
    "HeadConfig",
    "Homography",
    "ImagePNM",
    "MapResult",
    "MpcReport",
    "OffsetVector",
    "ParseError",
    "PipelineResult",
    "SchemaError",
    "ShapeError",
    "SimConfig",
    "StateError",
    "ValidationError",
    "VoxelGrid",
    "apply_corruption",
    "average_precision",
    "bci_activate",
    "bci_enhance",
    "build_fpn",
    "build_mpc_report",
    "build_voxel_grid",
    "cafr_backward",
    "cafr_forward",
    "cafr_gradcheck",
    "compose_homography",
    "corrupt_dataset",
    "corruption_seed",
    "cross_self_attention",
    "decode_detections",
    "decode_events",
    "decode_head",
    "decode_image",
    "decode_offsets",
    "decode_tensor",
    "encode_calibration",
    "encode_detections",
    "encode_events",
    "encode_image",
    "encode_offsets",
    "encode_tensor",
    "gen_anchors",
    "gen_pyramid_anchors",
    "head_forward",
    "init_cafr_weights",
    "init_fpn_weights",
    "init_head_weights",
    "load_fpn_weights",
    "load_head_weights",
    "save_fpn_weights",
    "save_head_weights",
    "iou_tlwh",
    "load_cafr_weights",
    "map_coco",
    "match_detections",
    "modality_dropout",
    "mpc",
    "normalize_timestamps",
    "nms",
    "parse_calibration",
    "psnr",
    "read_tensor",
    "read_tensor_bundle",
    "rpc",
    "run_pipeline_demo",
    "save_cafr_weights",
    "severity_params",
    "simulate_events",
    "tafr_refine",
    "warp_bbox",
    "warp_image",
    "warp_point",
    "warp_points",
    "write_tensor",
    "write_tensor_bundle",
]
