"""Detection metrics: IoU, COCO-style mAP, corruption means, relative curves.

All arithmetic is plain Python floats with fixed iteration orders (classes
ascending, IoU thresholds ascending, recall points ascending), so tiny
instances can be compared bit-for-bit against an independent reference
computation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence

from .errors import DomainError, ValidationError
from .formats_io import DetectionRecord

IOU_THRESHOLDS = tuple((50 + 5 * i) / 100.0 for i in range(10))
RECALL_POINTS = tuple(i / 100.0 for i in range(101))
DEFAULT_MAX_DETECTIONS = 100
CORRUPTION_TYPE_COUNT = 15
SEVERITY_COUNT = 5


def iou_tlwh(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two (x, y, w, h) top-left boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union


@dataclass
class MatchResult:
    """Per-detection TP flags in descending-score order, plus GT accounting."""

    flags: tuple
    scores: tuple
    n_gt: int
    unmatched_gt: int


def match_detections(
    preds: Sequence[DetectionRecord],
    gts: Sequence[Sequence[float]],
    iou_threshold: float,
) -> MatchResult:
    """Greedy one-to-one matching for a single image/class partition.

    Detections are visited by descending score (ties keep input order); each
    claims the unmatched ground-truth box of highest IoU when that IoU meets
    the threshold, else counts as a false positive.
    """
    for p in preds:
        if p.score is None:
            raise DomainError("matching needs scored detections")
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    taken = [False] * len(gts)
    flags, scores = [], []
    for i in order:
        box = preds[i].bbox
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            v = iou_tlwh(box, gt)
            if v > best_iou:
                best_j, best_iou = j, v
        hit = best_j >= 0 and best_iou >= iou_threshold
        if hit:
            taken[best_j] = True
        flags.append(hit)
        scores.append(preds[i].score)
    return MatchResult(tuple(flags), tuple(scores), len(gts), taken.count(False))


def average_precision(flags: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated AP from descending-score TP/FP flags.

    Precision is made monotone by taking, at each recall point, the best
    precision achieved at that recall or beyond. n_gt = 0 yields 0 (callers
    exclude such classes from averaging).
    """
    if n_gt < 0:
        raise DomainError(f"n_gt must be >= 0, got {n_gt}")
    if n_gt == 0:
        return 0.0
    tp = 0
    precisions, recalls = [], []
    for i, flag in enumerate(flags):
        if flag:
            tp += 1
        precisions.append(tp / (i + 1))
        recalls.append(tp / n_gt)
    total = 0.0
    for r in RECALL_POINTS:
        best = 0.0
        for p, rec in zip(precisions, recalls):
            if rec >= r and p > best:
                best = p
        total += best
    return total / len(RECALL_POINTS)


def _group(records: Sequence[DetectionRecord]) -> Dict[int, Dict[int, List[DetectionRecord]]]:
    by_class: Dict[int, Dict[int, List[DetectionRecord]]] = {}
    for r in records:
        by_class.setdefault(r.category_id, {}).setdefault(r.image_id, []).append(r)
    return by_class


def _cap_per_image(preds: Sequence[DetectionRecord], max_dets: int) -> List[DetectionRecord]:
    by_image: Dict[int, List[DetectionRecord]] = {}
    for p in preds:
        by_image.setdefault(p.image_id, []).append(p)
    kept = []
    for img in sorted(by_image):
        rows = sorted(by_image[img], key=lambda r: -r.score)[:max_dets]
        kept.extend(rows)
    return kept


def _class_flags(
    pred_imgs: Dict[int, List[DetectionRecord]],
    gt_imgs: Dict[int, List[DetectionRecord]],
    threshold: float,
) -> List[bool]:
    """Merge per-image match flags into one global descending-score list."""
    merged = []
    seq = 0
    for img in sorted(set(pred_imgs) | set(gt_imgs)):
        gts = [g.bbox for g in gt_imgs.get(img, [])]
        res = match_detections(pred_imgs.get(img, []), gts, threshold)
        for s, f in zip(res.scores, res.flags):
            merged.append((-s, seq, f))
            seq += 1
    merged.sort()
    return [f for _, _, f in merged]


@dataclass
class MapResult:
    """Threshold-averaged mAP, its 0.50 slice, and the per-class breakdown."""

    map: float
    map50: float
    per_class: dict

    def to_dict(self) -> dict:
        return {"map": self.map, "map50": self.map50, "per_class": dict(self.per_class)}


def map_coco(
    preds: Sequence[DetectionRecord],
    gts: Sequence[DetectionRecord],
    max_detections: int = DEFAULT_MAX_DETECTIONS,
) -> MapResult:
    """COCO-convention mAP over IoU 0.50:0.05:0.95.

    Detections are capped per image across classes; classes with zero
    ground-truth boxes are excluded from the class mean; each class AP is the
    mean over the 10 thresholds of the 101-point AP.
    """
    classes = sorted({g.category_id for g in gts})
    if not classes:
        raise DomainError("evaluation needs at least one ground-truth box")
    pred_groups = _group(_cap_per_image(preds, max_detections))
    gt_groups = _group(gts)

    per_class: Dict[int, float] = {}
    map50_sum = 0.0
    for c in classes:
        gt_imgs = gt_groups[c]
        pred_imgs = pred_groups.get(c, {})
        n_gt = sum(len(v) for v in gt_imgs.values())
        aps = []
        for t in IOU_THRESHOLDS:
            flags = _class_flags(pred_imgs, gt_imgs, t)
            aps.append(average_precision(flags, n_gt))
        per_class[c] = sum(aps) / len(aps)
        map50_sum += aps[0]
    n = len(classes)
    return MapResult(
        map=sum(per_class[c] for c in classes) / n,
        map50=map50_sum / n,
        per_class=per_class,
    )


# -- corruption aggregates ------------------------------------------------------------


def _check_matrix(map_matrix, strict: bool):
    rows = [list(r) for r in map_matrix]
    if not rows or not rows[0]:
        raise DomainError("corruption matrix must be non-empty")
    width = len(rows[0])
    for r in rows:
        if len(r) != width:
            raise DomainError("corruption matrix has a missing entry")
        for v in r:
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"mAP entry {v} outside [0,1]")
    if strict and (len(rows), width) != (CORRUPTION_TYPE_COUNT, SEVERITY_COUNT):
        raise DomainError(
            f"expected {CORRUPTION_TYPE_COUNT}x{SEVERITY_COUNT} matrix, "
            f"got {len(rows)}x{width}"
        )
    return rows


def mpc(map_matrix, strict: bool = True) -> float:
    """Mean over corruption types of the per-type mean over severities.

    strict mode enforces the full 15x5 grid; strict=False admits any
    rectangular matrix for small fixtures.
    """
    rows = _check_matrix(map_matrix, strict)
    return sum(sum(r) / len(r) for r in rows) / len(rows)


def rpc(map_clean: float, map_matrix, strict: bool = True) -> tuple:
    """Per-severity mean mAP over types, relative to the clean mAP."""
    if map_clean <= 0:
        raise DomainError(f"clean mAP must be positive, got {map_clean}")
    rows = _check_matrix(map_matrix, strict)
    n_s = len(rows[0])
    return tuple(
        sum(r[s] for r in rows) / len(rows) / map_clean for s in range(n_s)
    )


@dataclass
class MpcReport:
    """Clean mAP, the full type-by-severity matrix, and its aggregates."""

    map_clean: float
    map_matrix: tuple
    mpc: float
    rpc_per_severity: tuple

    def __post_init__(self):
        flat = [v for row in self.map_matrix for v in row]
        mean = sum(sum(r) / len(r) for r in self.map_matrix) / len(self.map_matrix)
        if abs(mean - self.mpc) > 1e-9:
            raise ValidationError("mpc does not match its matrix")
        if any(not 0.0 <= v <= 1.0 for v in flat):
            raise ValidationError("matrix entries must lie in [0,1]")

    def to_dict(self) -> dict:
        return {
            "map_clean": self.map_clean,
            "map_matrix": [list(r) for r in self.map_matrix],
            "mpc": self.mpc,
            "rpc_per_severity": list(self.rpc_per_severity),
        }


def build_mpc_report(map_clean: float, map_matrix, strict: bool = True) -> MpcReport:
    rows = _check_matrix(map_matrix, strict)
    return MpcReport(
        map_clean=map_clean,
        map_matrix=tuple(tuple(r) for r in rows),
        mpc=mpc(rows, strict=strict),
        rpc_per_severity=rpc(map_clean, rows, strict=strict),
    )
