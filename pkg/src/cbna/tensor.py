"""Rank-4 (B, H, W, C) tensors and the layer kernels used by the toy network.

Tensors are plain numpy arrays in row-major (B, H, W, C) order. Kernels keep
the dtype of their inputs (float32 in normal use, float64 for gradient
checking) and never write into their arguments.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

DTYPE = np.float32


def as_tensor(x, dtype=None) -> np.ndarray:
    """Validate ``x`` as a (B, H, W, C) tensor with every dimension >= 1."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 (B, H, W, C) tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"all tensor dimensions must be >= 1, got {arr.shape}")
    return arr


@dataclass
class ConvKernel:
    weights: np.ndarray  # (kh, kw, c_in, c_out)
    bias: np.ndarray  # (c_out,)
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 4:
            raise ShapeError(f"kernel weights must be (kh, kw, c_in, c_out), got {w.shape}")
        kh, kw, _, c_out = w.shape
        if np.asarray(self.bias).shape != (c_out,):
            raise ShapeError(f"bias must have shape ({c_out},), got {np.shape(self.bias)}")
        if self.stride < 1:
            raise ShapeError("stride must be a positive integer")
        if self.padding not in ("same", "valid"):
            raise ShapeError(f"unknown padding {self.padding!r}")
        if self.padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
            raise ShapeError("'same' padding requires odd kernel sizes")
        if not np.all(np.isfinite(w)):
            raise ShapeError("kernel weights must be finite")

    @property
    def shape(self):
        return self.weights.shape


def conv_output_size(size: int, k: int, stride: int, padding: str) -> int:
    pad = k // 2 if padding == "same" else 0
    return (size + 2 * pad - k) // stride + 1


def pad_same(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    ph, pw = kh // 2, kw // 2
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Receptive fields of an already padded input as (B, Ho, Wo, kh*kw*C)."""
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (B, H', W', C, kh, kw)
    if stride > 1:
        win = win[:, ::stride, ::stride]
    b, ho, wo, c = win.shape[:4]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b, ho, wo, kh * kw * c)


def conv2d(x, k: ConvKernel) -> np.ndarray:
    x = as_tensor(x)
    kh, kw, c_in, c_out = k.weights.shape
    if x.shape[3] != c_in:
        raise ShapeError(f"conv2d expects {c_in} input channels, got {x.shape[3]}")
    w = k.weights.reshape(kh * kw * c_in, c_out)
    if kh == 1 and kw == 1 and k.stride == 1:
        return x @ w + k.bias
    xp = pad_same(x, kh, kw) if k.padding == "same" else x
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ShapeError(f"input {x.shape} smaller than kernel {(kh, kw)}")
    return im2col(xp, kh, kw, k.stride) @ w + k.bias


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0)


def downsample_avg(x, factor: int = 2) -> np.ndarray:
    """Non-overlapping ``factor`` x ``factor`` average pooling."""
    x = as_tensor(x)
    b, h, w, c = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"spatial size {(h, w)} not divisible by {factor}")
    return x.reshape(b, h // factor, factor, w // factor, factor, c).mean(axis=(2, 4), dtype=x.dtype)


def upsample_nearest(x, factor: int) -> np.ndarray:
    x = as_tensor(x)
    if factor < 1:
        raise ShapeError("upsampling factor must be >= 1")
    if factor == 1:
        return x.copy()
    return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)


def softmax_channels(x) -> np.ndarray:
    x = as_tensor(x)
    z = np.exp(x - x.max(axis=3, keepdims=True))
    return z / z.sum(axis=3, keepdims=True)


def argmax_channels(x) -> np.ndarray:
    """Per-pixel class index; np.argmax returns the first maximum, i.e. the lowest index on ties."""
    return np.argmax(as_tensor(x), axis=3)
