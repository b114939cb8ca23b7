"""Readers and writers for every on-disk artifact.

Formats:
  * event files     - CSV with header ``t,x,y,p``, microsecond timestamps
  * images          - binary PNM (P5 grayscale / P6 color), maxval 255
  * tensors         - "FTNS" container: u32-LE rank and dims, f32-LE payload
  * calibration     - JSON with five 3x3 row-major matrices
  * detections      - newline-delimited JSON records (COCO-style tlwh boxes)

All codecs are pure value transformations. Decoding rejects invalid input
instead of repairing it; errors name the offending line or field.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import (
    DomainError,
    FormatError,
    ParseError,
    SchemaError,
    ValidationError,
)

TENSOR_MAGIC = b"FTNS"
MAX_TENSOR_RANK = 4

# Default category ids: 0 car, 1 pedestrian, 2 large vehicle.
DEFAULT_CATEGORIES = (0, 1, 2)


class Event(NamedTuple):
    """Single sensor event: pixel coordinates, microsecond timestamp, polarity."""

    x: int
    y: int
    t: int
    p: int


@dataclass
class EventStream:
    """Ordered event list plus the sensor geometry it was captured on."""

    sensor_width: int
    sensor_height: int
    events: list  # list[Event], non-decreasing in t


@dataclass
class ImagePNM:
    """Dense 8-bit image. ``pixels`` has shape (height, width, channels)."""

    width: int
    height: int
    channels: int  # 1 (grayscale) or 3 (color)
    pixels: np.ndarray  # uint8, shape (height, width, channels)

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width, self.channels):
            raise ValidationError(
                f"pixel buffer shape {self.pixels.shape} does not match "
                f"(height={self.height}, width={self.width}, channels={self.channels})"
            )
        if self.channels not in (1, 3):
            raise ValidationError(f"channels must be 1 or 3, got {self.channels}")

    def to_float01(self) -> np.ndarray:
        """Pixels as float64 in [0, 1], same shape."""
        return self.pixels.astype(np.float64) / 255.0

    @classmethod
    def from_float01(cls, arr: np.ndarray) -> "ImagePNM":
        """Clamp a float [0, 1] array back to an 8-bit image."""
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValidationError(f"expected (H, W, 1|3) array, got shape {arr.shape}")
        pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
        h, w, c = pixels.shape
        return cls(width=w, height=h, channels=c, pixels=pixels)


@dataclass
class CameraRig:
    """Intrinsics and rotations of the RGB / event camera pair.

    ``r_event_rgb`` rotates the RGB camera frame into the event camera frame;
    ``r_rgb`` / ``r_event`` are the per-camera rectifying rotations.
    """

    k_rgb: np.ndarray
    k_event: np.ndarray
    r_rgb: np.ndarray
    r_event: np.ndarray
    r_event_rgb: np.ndarray

    ORTHONORMALITY_TOL = 1e-6

    def __post_init__(self):
        for name in ("k_rgb", "k_event", "r_rgb", "r_event", "r_event_rgb"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.shape != (3, 3):
                raise ValidationError(f"{name} must be 3x3, got {m.shape}")
            setattr(self, name, m)
        for name in ("r_rgb", "r_event", "r_event_rgb"):
            r = getattr(self, name)
            err = np.abs(r.T @ r - np.eye(3)).max()
            if err > self.ORTHONORMALITY_TOL:
                raise ValidationError(
                    f"{name} is not orthonormal: max |R^T R - I| = {err:.3e} "
                    f"exceeds {self.ORTHONORMALITY_TOL:g}"
                )
        for name in ("k_rgb", "k_event"):
            k = getattr(self, name)
            if np.any(np.abs(k[np.tril_indices(3, -1)]) > 0):
                raise ValidationError(f"{name} must be upper-triangular")
            if np.any(np.diag(k) <= 0):
                raise ValidationError(f"{name} diagonal must be positive")


@dataclass
class DetectionRecord:
    """One detection or ground-truth box in file convention.

    ``bbox`` is (x, y, w, h) with (x, y) the top-left corner in pixels.
    ``score`` is None for ground truth.
    """

    image_id: int
    category_id: int
    bbox: tuple  # (x, y, w, h)
    score: Optional[float] = None

    def __post_init__(self):
        self.bbox = tuple(float(v) for v in self.bbox)
        if len(self.bbox) != 4:
            raise ValidationError(f"bbox must have 4 entries, got {len(self.bbox)}")
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise DomainError(
                f"bbox width/height must be positive, got w={self.bbox[2]}, h={self.bbox[3]}"
            )
        if self.score is not None:
            self.score = float(self.score)
            if not 0.0 <= self.score <= 1.0:
                raise DomainError(f"score must be in [0, 1], got {self.score}")


# ---------------------------------------------------------------------------
# Event CSV codec


def encode_events(stream: EventStream) -> bytes:
    """Serialize a stream to CSV with header ``t,x,y,p``."""
    lines = ["t,x,y,p"]
    for e in stream.events:
        lines.append(f"{e.t},{e.x},{e.y},{e.p}")
    return ("\n".join(lines) + "\n").encode("ascii")


def decode_events(
    data: bytes,
    sensor_width: Optional[int] = None,
    sensor_height: Optional[int] = None,
) -> EventStream:
    """Parse an event CSV file; validates ordering, bounds, and polarity.

    When the sensor dims are omitted they are inferred as max coordinate + 1,
    which requires at least one event.
    """
    if (sensor_width is None) != (sensor_height is None):
        raise DomainError("sensor_width and sensor_height must be given together")
    text = data.decode("ascii", errors="replace")
    lines = text.split("\n")
    if not lines or lines[0].strip() != "t,x,y,p":
        raise ParseError("missing or malformed header, expected 't,x,y,p'", line=1)
    events = []
    prev_t = None
    for lineno, raw in enumerate(lines[1:], start=2):
        if raw.strip() == "":
            continue
        parts = raw.split(",")
        if len(parts) != 4:
            raise ParseError(f"expected 4 fields, got {len(parts)}", line=lineno)
        try:
            t, x, y, p = (int(v) for v in parts)
        except ValueError:
            raise ParseError(f"non-integer field in '{raw}'", line=lineno) from None
        if p not in (-1, 1):
            raise DomainError(f"line {lineno}: polarity must be -1 or +1, got {p}")
        if x < 0 or y < 0:
            raise DomainError(f"line {lineno}: coordinates ({x}, {y}) must be non-negative")
        if sensor_width is not None and not (x < sensor_width and y < sensor_height):
            raise DomainError(
                f"line {lineno}: coordinates ({x}, {y}) outside sensor "
                f"{sensor_width}x{sensor_height}"
            )
        if prev_t is not None and t < prev_t:
            raise ValidationError(
                f"line {lineno}: timestamps must be non-decreasing ({t} < {prev_t})"
            )
        prev_t = t
        events.append(Event(x=x, y=y, t=t, p=p))
    if sensor_width is None:
        if not events:
            raise DomainError("cannot infer sensor dims from an empty stream")
        sensor_width = max(e.x for e in events) + 1
        sensor_height = max(e.y for e in events) + 1
    return EventStream(sensor_width=sensor_width, sensor_height=sensor_height, events=events)


# ---------------------------------------------------------------------------
# PNM image codec


def encode_image(img: ImagePNM) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def _read_pnm_tokens(data: bytes, count: int):
    """Read `count` whitespace-separated header tokens, skipping # comments.

    Returns (tokens, offset of the byte after the single whitespace that
    terminates the last token).
    """
    tokens = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < n and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise FormatError("truncated PNM header")
        tokens.append(data[start:i])
    if i >= n:
        raise FormatError("truncated PNM header")
    return tokens, i + 1  # skip exactly one whitespace byte after maxval


def decode_image(data: bytes) -> ImagePNM:
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise FormatError("unsupported image magic, expected P5 or P6")
    channels = 1 if data[:2] == b"P5" else 3
    tokens, offset = _read_pnm_tokens(data[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError("non-numeric PNM header field") from None
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, expected 255")
    if width <= 0 or height <= 0:
        raise FormatError(f"invalid dimensions {width}x{height}")
    payload = data[2 + offset :]
    expected = width * height * channels
    if len(payload) != expected:
        raise FormatError(
            f"payload has {len(payload)} bytes, expected {expected} "
            f"for {width}x{height}x{channels}"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return ImagePNM(width=width, height=height, channels=channels, pixels=pixels.copy())


# ---------------------------------------------------------------------------
# Tensor container codec


def encode_tensor(arr: np.ndarray) -> bytes:
    """Serialize an array as FTNS: little-endian u32 rank/dims, f32 payload.

    Values are stored at 32-bit precision; pass float32 data for bit-exact
    round trips.
    """
    arr = np.asarray(arr)
    if arr.ndim < 1 or arr.ndim > MAX_TENSOR_RANK:
        raise DomainError(f"tensor rank must be 1..{MAX_TENSOR_RANK}, got {arr.ndim}")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + payload


def decode_tensor(data: bytes) -> np.ndarray:
    """Parse an FTNS container back into a float32 array."""
    if len(data) < 8 or data[:4] != TENSOR_MAGIC:
        raise FormatError("bad tensor magic, expected 'FTNS'")
    (rank,) = struct.unpack_from("<I", data, 4)
    if rank < 1 or rank > MAX_TENSOR_RANK:
        raise FormatError(f"tensor rank must be 1..{MAX_TENSOR_RANK}, got {rank}")
    header_len = 8 + 4 * rank
    if len(data) < header_len:
        raise FormatError("truncated tensor header")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    count = 1
    for d in dims:
        count *= d
    payload = data[header_len:]
    if len(payload) != 4 * count:
        raise FormatError(
            f"tensor payload holds {len(payload) // 4} values, expected {count} "
            f"for dims {tuple(dims)}"
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return values.reshape(dims)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_tensor(f.read())


def write_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_tensor(arr))


BUNDLE_MANIFEST = "manifest.json"


def write_tensor_bundle(directory, arrays: dict, extra: Optional[dict] = None) -> None:
    """Write named arrays as .ftns members plus a JSON manifest naming them."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    members = {}
    for name, arr in arrays.items():
        fname = name.replace(".", "_") + ".ftns"
        write_tensor(d / fname, arr)
        members[name] = fname
    manifest = dict(extra or {})
    manifest["members"] = members
    (d / BUNDLE_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_tensor_bundle(directory):
    """Read a bundle directory back as ({name: array}, manifest)."""
    d = Path(directory)
    manifest = json.loads((d / BUNDLE_MANIFEST).read_text())
    members = manifest.get("members")
    if not isinstance(members, dict):
        raise SchemaError("bundle manifest has no 'members' table")
    arrays = {name: read_tensor(d / fname) for name, fname in members.items()}
    return arrays, manifest


# ---------------------------------------------------------------------------
# Calibration


_CALIB_KEYS = ("K_rgb", "K_event", "R_rgb", "R_event", "R_event_rgb")


def parse_calibration(data: bytes) -> CameraRig:
    """Parse calibration JSON into a validated CameraRig.

    Each key holds a 9-element row-major array. Rotation orthonormality is
    checked to 1e-6; intrinsics must be upper-triangular with positive
    diagonal.
    """
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"calibration is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("calibration root must be a JSON object")
    matrices = {}
    for key in _CALIB_KEYS:
        if key not in doc:
            raise SchemaError(f"calibration is missing matrix '{key}'")
        raw = doc[key]
        if not isinstance(raw, list) or len(raw) != 9:
            raise SchemaError(f"'{key}' must be a 9-element row-major array")
        try:
            matrices[key] = np.array([float(v) for v in raw], dtype=np.float64).reshape(3, 3)
        except (TypeError, ValueError):
            raise SchemaError(f"'{key}' contains a non-numeric entry") from None
    return CameraRig(
        k_rgb=matrices["K_rgb"],
        k_event=matrices["K_event"],
        r_rgb=matrices["R_rgb"],
        r_event=matrices["R_event"],
        r_event_rgb=matrices["R_event_rgb"],
    )


def encode_calibration(rig: CameraRig) -> bytes:
    doc = {
        "K_rgb": list(rig.k_rgb.reshape(-1)),
        "K_event": list(rig.k_event.reshape(-1)),
        "R_rgb": list(rig.r_rgb.reshape(-1)),
        "R_event": list(rig.r_event.reshape(-1)),
        "R_event_rgb": list(rig.r_event_rgb.reshape(-1)),
    }
    return json.dumps(doc, indent=2).encode("utf-8")


# ---------------------------------------------------------------------------
# Detection records (newline-delimited JSON)


def encode_detections(records: Sequence[DetectionRecord]) -> bytes:
    lines = []
    for r in records:
        doc = {
            "image_id": r.image_id,
            "category_id": r.category_id,
            "bbox": list(r.bbox),
        }
        if r.score is not None:
            doc["score"] = r.score
        lines.append(json.dumps(doc))
    return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")


def decode_detections(data: bytes, categories=None) -> list:
    """Parse newline-delimited detection records.

    When ``categories`` is given, every record's category_id must belong to it.
    Ground-truth records legitimately omit ``score``.
    """
    records = []
    for lineno, raw in enumerate(data.decode("utf-8").split("\n"), start=1):
        if raw.strip() == "":
            continue
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON record: {exc.msg}", line=lineno) from None
        for key in ("image_id", "category_id", "bbox"):
            if key not in doc:
                raise ParseError(f"record is missing '{key}'", line=lineno)
        bbox = doc["bbox"]
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise ParseError("bbox must be a 4-element array", line=lineno)
        if not all(isinstance(v, (int, float)) for v in bbox):
            raise ParseError("bbox entries must be numeric", line=lineno)
        if bbox[2] <= 0 or bbox[3] <= 0:
            raise DomainError(
                f"line {lineno}: bbox width/height must be positive, got {bbox[2]}, {bbox[3]}"
            )
        if categories is not None and doc["category_id"] not in categories:
            raise DomainError(
                f"line {lineno}: category_id {doc['category_id']} not in declared set"
            )
        records.append(
            DetectionRecord(
                image_id=int(doc["image_id"]),
                category_id=int(doc["category_id"]),
                bbox=tuple(bbox),
                score=doc.get("score"),
            )
        )
    return records
