"""Feature pyramid, anchor grid, detection subnets, box codec, and NMS.

The pyramid keeps the P1..P5 level naming used throughout this package
(P1 is the finest level; conventional FPN literature would call these
levels P3..P7 when the finest stride is 8). Anchors, head outputs, and the
decode path all share one flattening order: level, then row, then column,
then anchor index, so position n of the head output corresponds to anchor
n of the concatenated per-level anchor lists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import DomainError, ShapeError
from .eval_metrics import iou_tlwh
from .formats_io import DetectionRecord, read_tensor_bundle, write_tensor_bundle
from .tensor_math import ConvWeights, conv2d

SEED_MASK = 0xFFFFFFFFFFFFFFFF
DEFAULT_SCALES = (1.0, 2.0 ** (1.0 / 3.0), 2.0 ** (2.0 / 3.0))
DEFAULT_RATIOS = (0.5, 1.0, 2.0)
DEFAULT_SCORE_THRESHOLD = 0.05
DEFAULT_NMS_IOU = 0.5


@dataclass
class BBox:
    """Center-form box: center (x, y) plus positive width and height."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DomainError(f"box dims must be positive, got w={self.w}, h={self.h}")

    def to_tlwh(self) -> tuple:
        return (self.x - self.w / 2.0, self.y - self.h / 2.0, self.w, self.h)


@dataclass
class Anchor(BBox):
    """A BBox pinned to a pyramid level."""

    level: int = 0


@dataclass
class OffsetVector:
    """Dimensionless regression offsets (t_x, t_y, t_w, t_h)."""

    t_x: float
    t_y: float
    t_w: float
    t_h: float

    def __post_init__(self):
        vals = (self.t_x, self.t_y, self.t_w, self.t_h)
        if not all(math.isfinite(v) for v in vals):
            raise DomainError(f"offsets must be finite, got {vals}")


@dataclass
class HeadConfig:
    """Class count plus anchor layout; anchors per position is |scales|*|ratios|."""

    num_classes: int
    width: int = 256
    scales: tuple = DEFAULT_SCALES
    ratios: tuple = DEFAULT_RATIOS

    def __post_init__(self):
        if self.num_classes < 1 or self.width < 1:
            raise DomainError("num_classes and width must be positive")
        if not self.scales or not self.ratios:
            raise DomainError("scales and ratios must be non-empty")

    @property
    def anchors_per_position(self) -> int:
        return len(self.scales) * len(self.ratios)


@dataclass
class FeaturePyramid:
    """Five same-channel levels with ceil-halving spatial dims and doubling strides."""

    levels: tuple
    strides: tuple

    def __post_init__(self):
        if len(self.levels) != 5 or len(self.strides) != 5:
            raise ShapeError("pyramid must have exactly 5 levels")
        chans = {lvl.shape[0] for lvl in self.levels}
        if len(chans) != 1:
            raise ShapeError(f"pyramid channel counts differ: {sorted(chans)}")
        for i in range(4):
            h, w = self.levels[i].shape[1:]
            hn, wn = self.levels[i + 1].shape[1:]
            if (hn, wn) != (-(-h // 2), -(-w // 2)):
                raise ShapeError(
                    f"level {i + 2} dims {(hn, wn)} are not the ceil-half of {(h, w)}"
                )
            if self.strides[i + 1] != 2 * self.strides[i]:
                raise ShapeError("strides must double per level")


# -- weights ----------------------------------------------------------------------

@dataclass
class FpnWeights:
    """Four lateral 1x1 convs, four 3x3 smoothing convs, one stride-2 extra conv."""

    laterals: tuple
    smooths: tuple
    extra: ConvWeights

    def __post_init__(self):
        if len(self.laterals) != 4 or len(self.smooths) != 4:
            raise ShapeError("need 4 lateral and 4 smoothing convs")


@dataclass
class HeadWeights:
    """Shared-across-levels classification and regression towers."""

    cls_tower: tuple
    cls_out: ConvWeights
    reg_tower: tuple
    reg_out: ConvWeights


def _uniform_conv(rng, out_ch: int, in_ch: int, k: int) -> ConvWeights:
    bound = 1.0 / math.sqrt(in_ch * k * k)
    kernel = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k))
    bias = rng.uniform(-bound, bound, size=out_ch)
    return ConvWeights(kernel, bias)


def init_fpn_weights(in_channels: Sequence[int], width: int = 256, seed: int = 0) -> FpnWeights:
    """Seeded fan-in uniform init for fixture pyramids."""
    if len(in_channels) != 4:
        raise ShapeError(f"need 4 backbone channel counts, got {len(in_channels)}")
    rng = np.random.Generator(np.random.Philox(key=seed & SEED_MASK))
    laterals = tuple(_uniform_conv(rng, width, c, 1) for c in in_channels)
    smooths = tuple(_uniform_conv(rng, width, width, 3) for _ in range(4))
    extra = _uniform_conv(rng, width, width, 3)
    return FpnWeights(laterals, smooths, extra)


def init_head_weights(cfg: HeadConfig, seed: int = 0) -> HeadWeights:
    """Seeded fan-in uniform init for the two subnets."""
    rng = np.random.Generator(np.random.Philox(key=seed & SEED_MASK))
    a = cfg.anchors_per_position
    cls_tower = tuple(_uniform_conv(rng, cfg.width, cfg.width, 3) for _ in range(4))
    cls_out = _uniform_conv(rng, cfg.num_classes * a, cfg.width, 3)
    reg_tower = tuple(_uniform_conv(rng, cfg.width, cfg.width, 3) for _ in range(4))
    reg_out = _uniform_conv(rng, 4 * a, cfg.width, 3)
    return HeadWeights(cls_tower, cls_out, reg_tower, reg_out)


def save_fpn_weights(w: FpnWeights, directory) -> None:
    arrays = {}
    for i in range(4):
        arrays[f"lateral{i + 1}.kernel"] = w.laterals[i].kernel
        arrays[f"lateral{i + 1}.bias"] = w.laterals[i].bias
        arrays[f"smooth{i + 1}.kernel"] = w.smooths[i].kernel
        arrays[f"smooth{i + 1}.bias"] = w.smooths[i].bias
    arrays["extra.kernel"] = w.extra.kernel
    arrays["extra.bias"] = w.extra.bias
    write_tensor_bundle(directory, arrays)


def load_fpn_weights(directory) -> FpnWeights:
    arrays, _ = read_tensor_bundle(directory)
    laterals = tuple(
        ConvWeights(arrays[f"lateral{i + 1}.kernel"], arrays[f"lateral{i + 1}.bias"])
        for i in range(4)
    )
    smooths = tuple(
        ConvWeights(arrays[f"smooth{i + 1}.kernel"], arrays[f"smooth{i + 1}.bias"])
        for i in range(4)
    )
    return FpnWeights(laterals, smooths, ConvWeights(arrays["extra.kernel"], arrays["extra.bias"]))


def save_head_weights(w: HeadWeights, directory) -> None:
    arrays = {}
    for i in range(4):
        arrays[f"cls_tower{i + 1}.kernel"] = w.cls_tower[i].kernel
        arrays[f"cls_tower{i + 1}.bias"] = w.cls_tower[i].bias
        arrays[f"reg_tower{i + 1}.kernel"] = w.reg_tower[i].kernel
        arrays[f"reg_tower{i + 1}.bias"] = w.reg_tower[i].bias
    arrays["cls_out.kernel"] = w.cls_out.kernel
    arrays["cls_out.bias"] = w.cls_out.bias
    arrays["reg_out.kernel"] = w.reg_out.kernel
    arrays["reg_out.bias"] = w.reg_out.bias
    write_tensor_bundle(directory, arrays)


def load_head_weights(directory) -> HeadWeights:
    arrays, _ = read_tensor_bundle(directory)
    cls_tower = tuple(
        ConvWeights(arrays[f"cls_tower{i + 1}.kernel"], arrays[f"cls_tower{i + 1}.bias"])
        for i in range(4)
    )
    reg_tower = tuple(
        ConvWeights(arrays[f"reg_tower{i + 1}.kernel"], arrays[f"reg_tower{i + 1}.bias"])
        for i in range(4)
    )
    return HeadWeights(
        cls_tower,
        ConvWeights(arrays["cls_out.kernel"], arrays["cls_out.bias"]),
        reg_tower,
        ConvWeights(arrays["reg_out.kernel"], arrays["reg_out.bias"]),
    )


# -- pyramid ----------------------------------------------------------------------

def _upsample2x_to(x: np.ndarray, h: int, w: int) -> np.ndarray:
    up = np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)
    return up[:, :h, :w]


def build_fpn(backbone_feats: Sequence[np.ndarray], w: FpnWeights, base_stride: int = 4) -> FeaturePyramid:
    """Standard top-down pyramid over four backbone maps, finest first.

    Lateral 1x1 convs project to a common width; coarser levels are
    nearest-neighbor upsampled 2x and added on the way down; each merged map
    gets a 3x3 smoothing conv; the fifth level is a stride-2 3x3 conv on the
    fourth. Any four maps whose dims ceil-halve level to level are accepted.
    """
    if len(backbone_feats) != 4:
        raise ShapeError(f"need 4 backbone maps, got {len(backbone_feats)}")
    feats = [np.asarray(f, dtype=np.float64) for f in backbone_feats]
    laterals = [conv2d(f, lw) for f, lw in zip(feats, w.laterals)]
    merged = [None] * 4
    merged[3] = laterals[3]
    for i in (2, 1, 0):
        h, wd = laterals[i].shape[1:]
        merged[i] = laterals[i] + _upsample2x_to(merged[i + 1], h, wd)
    smoothed = [conv2d(m, sw, stride=1, pad=1) for m, sw in zip(merged, w.smooths)]
    p5 = conv2d(smoothed[3], w.extra, stride=2, pad=1)
    strides = tuple(base_stride * 2 ** i for i in range(5))
    return FeaturePyramid(tuple(smoothed) + (p5,), strides)


# -- anchors ----------------------------------------------------------------------

def gen_anchors(height: int, width: int, stride: int, cfg: HeadConfig, level: int = 0) -> List[Anchor]:
    """A = |scales|*|ratios| anchors per cell, centers at (i+0.5)*stride.

    Base size is 4*stride; w = base*scale*sqrt(ratio), h = base*scale/sqrt(ratio),
    so w/h equals the ratio. Order: row, column, then ratio-major anchor index.
    """
    if stride < 1:
        raise DomainError(f"stride must be >= 1, got {stride}")
    base = 4.0 * stride
    shapes = [
        (base * s * math.sqrt(r), base * s / math.sqrt(r))
        for r in cfg.ratios
        for s in cfg.scales
    ]
    anchors = []
    for i in range(height):
        cy = (i + 0.5) * stride
        for j in range(width):
            cx = (j + 0.5) * stride
            anchors.extend(Anchor(cx, cy, aw, ah, level) for aw, ah in shapes)
    return anchors


def gen_pyramid_anchors(pyr: FeaturePyramid, cfg: HeadConfig) -> List[Anchor]:
    """Anchors for every level, concatenated in level order."""
    out = []
    for idx, (lvl, stride) in enumerate(zip(pyr.levels, pyr.strides)):
        out.extend(gen_anchors(lvl.shape[1], lvl.shape[2], stride, cfg, level=idx + 1))
    return out


# -- head -------------------------------------------------------------------------

def _run_tower(x: np.ndarray, tower: tuple, out: ConvWeights) -> np.ndarray:
    for cw in tower:
        x = np.maximum(conv2d(x, cw, stride=1, pad=1), 0.0)
    return conv2d(x, out, stride=1, pad=1)


def head_forward(pyr: FeaturePyramid, w: HeadWeights, cfg: HeadConfig):
    """Run both subnets on every level.

    Returns (cls, reg): cls is [N, K] of sigmoid scores and reg is [N, 4]
    offsets, N = sum over levels of H*W*A, rows in the shared anchor order.
    """
    a = cfg.anchors_per_position
    k = cfg.num_classes
    cls_rows, reg_rows = [], []
    for lvl in pyr.levels:
        logits = _run_tower(lvl, w.cls_tower, w.cls_out)
        offsets = _run_tower(lvl, w.reg_tower, w.reg_out)
        h, wd = lvl.shape[1:]
        # channel layout (A,K) resp. (A,4); reorder to rows of (pos, anchor)
        cls_rows.append(
            logits.reshape(a, k, h, wd).transpose(2, 3, 0, 1).reshape(h * wd * a, k)
        )
        reg_rows.append(
            offsets.reshape(a, 4, h, wd).transpose(2, 3, 0, 1).reshape(h * wd * a, 4)
        )
    logits = np.vstack(cls_rows)
    scores = 1.0 / (1.0 + np.exp(-logits))
    return scores, np.vstack(reg_rows)


# -- offset codec -------------------------------------------------------------------

def encode_offsets(anchor: Anchor, gt: BBox) -> OffsetVector:
    """Anchor-relative offsets: shifts in anchor units, log size ratios."""
    if gt.w <= 0 or gt.h <= 0:
        raise DomainError(f"ground-truth dims must be positive, got {gt.w}x{gt.h}")
    return OffsetVector(
        (gt.x - anchor.x) / anchor.w,
        (gt.y - anchor.y) / anchor.h,
        math.log(gt.w / anchor.w),
        math.log(gt.h / anchor.h),
    )


def decode_offsets(anchor: Anchor, t: OffsetVector) -> BBox:
    """Inverse of encode_offsets; overflow in exp is a domain error."""
    try:
        w = anchor.w * math.exp(t.t_w)
        h = anchor.h * math.exp(t.t_h)
    except OverflowError:
        raise DomainError(f"offset ({t.t_w}, {t.t_h}) overflows the size decode")
    return BBox(t.t_x * anchor.w + anchor.x, t.t_y * anchor.h + anchor.y, w, h)


# -- non-maximum suppression -----------------------------------------------------------

def nms(dets: Sequence[DetectionRecord], iou_threshold: float) -> List[DetectionRecord]:
    """Greedy suppression per (image, class).

    Candidates are visited by descending score (ties keep input order) and
    dropped when their IoU with an already kept same-group box exceeds the
    threshold. Output is sorted the same way.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise DomainError(f"iou_threshold must be in [0,1], got {iou_threshold}")
    for d in dets:
        if d.score is None:
            raise DomainError("nms needs scored detections")
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept_by_group: dict = {}
    kept_idx = []
    for i in order:
        d = dets[i]
        group = kept_by_group.setdefault((d.image_id, d.category_id), [])
        if any(iou_tlwh(d.bbox, k.bbox) > iou_threshold for k in group):
            continue
        group.append(d)
        kept_idx.append(i)
    return [dets[i] for i in kept_idx]


def decode_head(
    cls: np.ndarray,
    reg: np.ndarray,
    anchors: Sequence[Anchor],
    image_id: int,
    score_threshold: float = DEFAULT_SCORE_THRESHOLD,
    iou_threshold: float = DEFAULT_NMS_IOU,
    categories: Optional[Sequence[int]] = None,
    pre_nms_top_k: int = 1000,
) -> List[DetectionRecord]:
    """Turn head outputs into suppressed detection records for one image.

    Candidates over the score threshold are trimmed to the pre_nms_top_k
    best before suppression, which bounds NMS cost on dense outputs.
    """
    cls = np.asarray(cls)
    reg = np.asarray(reg)
    if cls.shape[0] != len(anchors) or reg.shape != (len(anchors), 4):
        raise ShapeError(
            f"head outputs {cls.shape}/{reg.shape} do not cover {len(anchors)} anchors"
        )
    if categories is None:
        categories = list(range(cls.shape[1]))
    elif len(categories) != cls.shape[1]:
        raise ShapeError(f"{len(categories)} categories for {cls.shape[1]} classes")

    rows, cols = np.nonzero(cls > score_threshold)
    if len(rows) > pre_nms_top_k:
        best = np.argsort(-cls[rows, cols], kind="stable")[:pre_nms_top_k]
        rows, cols = rows[best], cols[best]
    candidates = []
    for n, k in zip(rows, cols):
        box = decode_offsets(anchors[n], OffsetVector(*reg[n]))
        candidates.append(
            DetectionRecord(
                image_id=image_id,
                category_id=int(categories[k]),
                bbox=box.to_tlwh(),
                score=float(cls[n, k]),
            )
        )
    return nms(candidates, iou_threshold)
