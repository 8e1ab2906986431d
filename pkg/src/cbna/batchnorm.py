"""Batch normalization: normalization, batch statistics and running statistics."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError
from .tensor import DTYPE, as_tensor

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


@dataclass(eq=False)
class BatchStats:
    """Per-channel mean and (biased) variance.

    ``mean``/``var`` are (C,) for statistics shared by a whole batch, or (B, C)
    when every sample of the batch carries its own statistics.
    """

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean)
        self.var = np.asarray(self.var)
        if self.mean.shape != self.var.shape:
            raise ShapeError(f"mean {self.mean.shape} and var {self.var.shape} differ")
        if np.any(self.var < 0):
            raise ValueError("variance must be non-negative")


@dataclass(eq=False)
class BnLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM

    kind = "bn"

    def __post_init__(self):
        c = np.shape(self.gamma)
        for name in ("beta", "running_mean", "running_var"):
            if np.shape(getattr(self, name)) != c:
                raise ShapeError(f"{name} shape {np.shape(getattr(self, name))} != gamma shape {c}")
        if np.any(np.asarray(self.running_var) < 0):
            raise ValueError("running_var must be non-negative")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not 0 <= self.momentum <= 1:
            raise ValueError("momentum must lie in [0, 1]")

    @classmethod
    def fresh(cls, channels: int, eps: float = DEFAULT_EPS, momentum: float = DEFAULT_MOMENTUM) -> "BnLayer":
        return cls(
            gamma=np.ones(channels, DTYPE),
            beta=np.zeros(channels, DTYPE),
            running_mean=np.zeros(channels, DTYPE),
            running_var=np.ones(channels, DTYPE),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return len(self.gamma)

    def source_stats(self) -> BatchStats:
        return BatchStats(self.running_mean, self.running_var)


def compute_batch_stats(x, per_sample: bool = False) -> BatchStats:
    """Mean and biased variance over batch and spatial positions, per channel.

    Sums are accumulated in float64. With ``per_sample`` the batch axis is kept,
    which is the same as calling this on every sample separately.
    """
    x = as_tensor(x).astype(np.float64)
    axes = (1, 2) if per_sample else (0, 1, 2)
    mean = x.mean(axis=axes)
    centered = x - (mean[:, None, None, :] if per_sample else mean)
    var = np.maximum((centered * centered).mean(axis=axes), 0.0)
    return BatchStats(mean, var)


def _broadcast(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    return v[:, None, None, :] if v.ndim == 2 else v


def normalize(x, stats: BatchStats, layer: BnLayer) -> np.ndarray:
    """gamma * (x - mean) / sqrt(var + eps) + beta with caller-chosen statistics."""
    x = as_tensor(x)
    c = x.shape[3]
    if stats.mean.shape[-1] != c or layer.channels != c:
        raise ShapeError(f"normalize: tensor has {c} channels, layer {layer.channels}, stats {stats.mean.shape}")
    if stats.mean.ndim == 2 and stats.mean.shape[0] != x.shape[0]:
        raise ShapeError("per-sample statistics do not match the batch size")
    scale = np.asarray(layer.gamma, np.float64) / np.sqrt(np.asarray(stats.var, np.float64) + layer.eps)
    mean = _broadcast(np.asarray(stats.mean).astype(x.dtype), x)
    scale = _broadcast(scale.astype(x.dtype), x)
    return (x - mean) * scale + np.asarray(layer.beta, x.dtype)


def update_running_stats(layer: BnLayer, batch: BatchStats) -> BnLayer:
    """One exponential-moving-average step; returns a new layer."""
    m = layer.momentum
    dtype = np.asarray(layer.running_mean).dtype
    mean = (1 - m) * np.asarray(layer.running_mean, np.float64) + m * batch.mean
    var = (1 - m) * np.asarray(layer.running_var, np.float64) + m * batch.var
    return replace(layer, running_mean=mean.astype(dtype), running_var=np.maximum(var, 0).astype(dtype))


def inference_forward(x, layer: BnLayer) -> np.ndarray:
    return normalize(x, layer.source_stats(), layer)
