"""Dense tensor kernels with hand-derived backward passes.

Forward ops work on plain numpy arrays (row-major, rank <= 4). Each op has a
``*_forward`` variant returning an activation cache and a ``*_vjp`` computing
vector-Jacobian products from that cache, so gradients of any composition can
be assembled by chaining. Compute in float64 for verification; float32 is
accepted for throughput.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError, StateError

CHANNEL_STATS_EPS = 1e-5


@dataclass
class ConvWeights:
    """Cross-correlation kernel (out_ch, in_ch, k_h, k_w) plus per-output bias."""

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.kernel)
        if k.dtype != np.float32:
            k = k.astype(np.float64, copy=False)
        b = np.asarray(self.bias).astype(k.dtype, copy=False)
        if k.ndim != 4:
            raise ShapeError(f"kernel must be rank 4, got rank {k.ndim}")
        if b.shape != (k.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match {k.shape[0]} outputs")
        if not (np.all(np.isfinite(k)) and np.all(np.isfinite(b))):
            raise DomainError("conv weights must be finite")
        self.kernel = k
        self.bias = b

    @property
    def out_ch(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_ch(self) -> int:
        return self.kernel.shape[1]

    @property
    def k_h(self) -> int:
        return self.kernel.shape[2]

    @property
    def k_w(self) -> int:
        return self.kernel.shape[3]


def _require_cache(cache, op: str):
    if cache is None:
        raise StateError(f"{op}_vjp needs the cache from {op}_forward")


# -- convolution --------------------------------------------------------------

@dataclass
class ConvCache:
    cols: np.ndarray
    kernel: np.ndarray
    x_shape: tuple
    stride: int
    pad: int
    out_shape: tuple


def _conv_out_dims(h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> tuple:
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit {h}x{w} input with pad {pad}")
    return oh, ow


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]
    # (C, oh, ow, kh, kw) -> (C*kh*kw, oh*ow)
    return windows.transpose(0, 3, 4, 1, 2).reshape(xp.shape[0] * kh * kw, oh * ow)


def conv2d_forward(x: np.ndarray, w: ConvWeights, stride: int = 1, pad: int = 0):
    """2-D cross-correlation with bias; returns (output, cache)."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"conv input must be [C,H,W], got rank {x.ndim}")
    if x.shape[0] != w.in_ch:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel expects {w.in_ch}")
    if stride < 1 or pad < 0:
        raise DomainError(f"stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    c, h, wid = x.shape
    oh, ow = _conv_out_dims(h, wid, w.k_h, w.k_w, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, w.k_h, w.k_w, stride, oh, ow)
    flat = w.kernel.reshape(w.out_ch, -1) @ cols + w.bias[:, None]
    y = flat.reshape(w.out_ch, oh, ow)
    cache = ConvCache(cols, w.kernel, x.shape, stride, pad, y.shape)
    return y, cache


def conv2d(x: np.ndarray, w: ConvWeights, stride: int = 1, pad: int = 0) -> np.ndarray:
    return conv2d_forward(x, w, stride, pad)[0]


def conv2d_vjp(cache: ConvCache, gy: np.ndarray):
    """Gradients (dx, dkernel, dbias) for conv2d."""
    _require_cache(cache, "conv2d")
    o, oh, ow = cache.out_shape
    gy_flat = np.asarray(gy).reshape(o, oh * ow)
    gb = gy_flat.sum(axis=1)
    gk = (gy_flat @ cache.cols.T).reshape(cache.kernel.shape)
    gcols = cache.kernel.reshape(o, -1).T @ gy_flat

    c, h, wid = cache.x_shape
    kh, kw = cache.kernel.shape[2], cache.kernel.shape[3]
    s, p = cache.stride, cache.pad
    gxp = np.zeros((c, h + 2 * p, wid + 2 * p), dtype=gcols.dtype)
    g = gcols.reshape(c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + s * oh:s, j:j + s * ow:s] += g[:, i, j]
    gx = gxp[:, p:p + h, p:p + wid] if p else gxp
    return gx, gk, gb


# -- linear projection ---------------------------------------------------------

def linear(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Row-wise projection [N,D_in] @ [D_in,D_out]."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"cannot multiply {x.shape} by {weight.shape}")
    return x @ weight


def linear_vjp(x: np.ndarray, weight: np.ndarray, gy: np.ndarray):
    """Gradients (dx, dweight) for linear."""
    gy = np.asarray(gy)
    return gy @ weight.T, x.T @ gy


# -- softmax -------------------------------------------------------------------

def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax input must be [N,M], got rank {x.ndim}")
    if not np.all(np.isfinite(x)):
        raise DomainError("softmax input must be finite")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_vjp(s: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Gradient through softmax given its output ``s``."""
    _require_cache(s, "softmax_rows")
    inner = (gy * s).sum(axis=1, keepdims=True)
    return s * (gy - inner)


# -- per-channel statistics ------------------------------------------------------

def channel_stats(x: np.ndarray, eps: float = CHANNEL_STATS_EPS):
    """Per-channel mean and epsilon-floored std over the spatial axes.

    sigma_c = sqrt(population_variance_c + eps), so a constant channel still has
    a usable positive scale.
    """
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[1] * x.shape[2] < 1:
        raise ShapeError(f"channel_stats needs [C,H,W] with H*W >= 1, got {x.shape}")
    mu = x.mean(axis=(1, 2))
    var = x.var(axis=(1, 2))
    return mu, np.sqrt(var + eps)


def channel_stats_vjp(x: np.ndarray, sigma: np.ndarray, gmu: np.ndarray, gsigma: np.ndarray) -> np.ndarray:
    """Gradient wrt x given gradients on (mu, sigma).

    d mu_c / d x_i = 1/N; d sigma_c / d x_i = (x_i - mu_c) / (N * sigma_c).
    """
    _require_cache(x, "channel_stats")
    n = x.shape[1] * x.shape[2]
    mu = x.mean(axis=(1, 2))
    gx = np.broadcast_to((gmu / n)[:, None, None], x.shape).copy()
    gx += (gsigma / (n * sigma))[:, None, None] * (x - mu[:, None, None])
    return gx


# -- elementwise ------------------------------------------------------------------

def multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise shapes differ: {a.shape} vs {b.shape}")
    return a * b


def multiply_vjp(a: np.ndarray, b: np.ndarray, gy: np.ndarray):
    return gy * b, gy * a


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise shapes differ: {a.shape} vs {b.shape}")
    return a + b


def add_vjp(gy: np.ndarray):
    return gy, gy


# -- finite-difference oracle --------------------------------------------------

def numeric_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f(x); mutates x transiently."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.ravel(), grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(a: float, b: float) -> float:
    """|a - b| scaled by max(1, |a|, |b|) so near-zero gradients compare sanely."""
    return abs(a - b) / max(1.0, abs(a), abs(b))
