"""Homography between the RGB and event cameras; point, image, and box warps.

The two sensors see the same distant scene from nearly the same spot, so the
alignment map is a pure-rotation homography built from the rig's intrinsics
and rotations. Image warping uses inverse mapping with bilinear sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError, ValidationError
from .formats_io import CameraRig, ImagePNM

SINGULARITY_TOL = 1e-12


@dataclass
class Homography:
    """Nonsingular 3x3 projective map between pixel planes."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ShapeError(f"homography must be 3x3, got {m.shape}")
        if abs(np.linalg.det(m)) <= SINGULARITY_TOL:
            raise ValidationError("homography is singular")
        self.matrix = m

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))


def compose_homography(rig: CameraRig, convention: str = "printed") -> Homography:
    """Build the RGB-to-event alignment homography from a camera rig.

    ``printed`` composes K_event . R_rgb . R_event_rgb . R_event^T . K_rgb^-1.
    ``rectified`` is the conventional rectified-stereo alternative,
    K_event . R_event . R_event_rgb . R_rgb^T . K_rgb^-1, kept behind this
    switch for experimentation.
    """
    if abs(np.linalg.det(rig.k_rgb)) <= SINGULARITY_TOL:
        raise ValidationError("K_rgb is singular, cannot invert")
    k_rgb_inv = np.linalg.inv(rig.k_rgb)
    if convention == "printed":
        m = rig.k_event @ rig.r_rgb @ rig.r_event_rgb @ rig.r_event.T @ k_rgb_inv
    elif convention == "rectified":
        m = rig.k_event @ rig.r_event @ rig.r_event_rgb @ rig.r_rgb.T @ k_rgb_inv
    else:
        raise DomainError(f"unknown convention '{convention}'")
    return Homography(m)


def warp_point(h: Homography, point) -> tuple:
    """Map (u, v) through the homography and dehomogenize."""
    u, v = float(point[0]), float(point[1])
    x = h.matrix @ np.array([u, v, 1.0])
    if abs(x[2]) <= SINGULARITY_TOL:
        raise DomainError(f"point ({u}, {v}) maps to infinity")
    return (x[0] / x[2], x[1] / x[2])


def warp_points(h: Homography, points: np.ndarray) -> np.ndarray:
    """Vectorized warp of an (N, 2) point array."""
    pts = np.asarray(points, dtype=np.float64)
    ones = np.ones((pts.shape[0], 1))
    hom = np.hstack([pts, ones]) @ h.matrix.T
    wcol = hom[:, 2]
    if np.any(np.abs(wcol) <= SINGULARITY_TOL):
        raise DomainError("a point maps to infinity")
    return hom[:, :2] / wcol[:, None]


def warp_image(
    h: Homography,
    src: ImagePNM,
    out_w: int,
    out_h: int,
    interpolation: str = "bilinear",
) -> ImagePNM:
    """Resample ``src`` under the homography via inverse mapping.

    Each output pixel samples the source at H^-1 (u, v, 1); taps outside the
    source are zero. ``interpolation`` is 'bilinear' or 'nearest' (for label
    masks).
    """
    if out_w <= 0 or out_h <= 0:
        raise DomainError(f"output dims must be positive, got {out_w}x{out_h}")
    if interpolation not in ("bilinear", "nearest"):
        raise DomainError(f"unknown interpolation '{interpolation}'")
    hinv = h.inverse().matrix

    us, vs = np.meshgrid(np.arange(out_w), np.arange(out_h))
    coords = np.stack([us.ravel(), vs.ravel(), np.ones(us.size)], axis=0).astype(np.float64)
    mapped = hinv @ coords
    w_col = mapped[2]
    finite = np.abs(w_col) > SINGULARITY_TOL
    safe_w = np.where(finite, w_col, 1.0)
    sx = mapped[0] / safe_w
    sy = mapped[1] / safe_w

    src_px = src.pixels.astype(np.float64)
    sh, sw = src.height, src.width
    out = np.zeros((out_h * out_w, src.channels), dtype=np.float64)

    if interpolation == "nearest":
        xr = np.rint(sx).astype(np.int64)
        yr = np.rint(sy).astype(np.int64)
        ok = finite & (xr >= 0) & (xr < sw) & (yr >= 0) & (yr < sh)
        out[ok] = src_px[yr[ok], xr[ok]]
    else:
        x0 = np.floor(sx).astype(np.int64)
        y0 = np.floor(sy).astype(np.int64)
        fx = sx - x0
        fy = sy - y0
        for dy in (0, 1):
            wy = (1.0 - fy) if dy == 0 else fy
            yt = y0 + dy
            for dx in (0, 1):
                wx = (1.0 - fx) if dx == 0 else fx
                xt = x0 + dx
                ok = finite & (xt >= 0) & (xt < sw) & (yt >= 0) & (yt < sh)
                if np.any(ok):
                    out[ok] += (wy[ok] * wx[ok])[:, None] * src_px[yt[ok], xt[ok]]

    pixels = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    pixels = pixels.reshape(out_h, out_w, src.channels)
    return ImagePNM(width=out_w, height=out_h, channels=src.channels, pixels=pixels)


def warp_bbox(h: Homography, box, clip_w: float, clip_h: float):
    """Warp a (x, y, w, h) top-left box: corner hull, then clip.

    Returns None when the clipped box has zero area.
    """
    x, y, w, hgt = (float(v) for v in box)
    if w <= 0 or hgt <= 0:
        raise DomainError(f"box dims must be positive, got w={w}, h={hgt}")
    corners = np.array(
        [[x, y], [x + w, y], [x, y + hgt], [x + w, y + hgt]], dtype=np.float64
    )
    warped = warp_points(h, corners)
    x0, y0 = warped.min(axis=0)
    x1, y1 = warped.max(axis=0)
    x0c, y0c = max(x0, 0.0), max(y0, 0.0)
    x1c, y1c = min(x1, float(clip_w)), min(y1, float(clip_h))
    if x1c <= x0c or y1c <= y0c:
        return None
    return (x0c, y0c, x1c - x0c, y1c - y0c)
