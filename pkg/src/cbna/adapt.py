"""Inference-time BN adaptation strategies and their FLOP accounting.

Every strategy only changes which statistics the BN layers normalize with:

* ``none``       stored source statistics.
* ``cli``        statistics of the current input (alias ``czhang``).
* ``cklingner``  pass 1 as ``cli`` records per-layer statistics; pass 2 reruns
                 the input normalizing with ``(1 - eta) * source + eta * recorded``.
* ``cbna``       single pass; each BN layer mixes the source statistics with the
                 statistics of its own input, which already went through the
                 mixed normalization of all earlier BN layers.

Adaptation never touches the model: all statistics live for one call only.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .batchnorm import BatchStats, compute_batch_stats
from .segnet import SegModel, SegOutput, run_logits, source_stats_provider
from .tensor import argmax_channels, as_tensor, conv_output_size, softmax_channels

DEFAULT_ETA = 0.2


class Mode(str, Enum):
    NO_ADAPT = "none"
    CLI = "cli"
    CKLINGNER = "cklingner"
    CBNA = "cbna"

    @classmethod
    def parse(cls, name) -> "Mode":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "-")
        aliases = {
            "none": cls.NO_ADAPT, "noadapt": cls.NO_ADAPT, "no-adapt": cls.NO_ADAPT,
            "cli": cls.CLI, "c-li": cls.CLI, "czhang": cls.CLI, "c-zhang": cls.CLI,
            "cklingner": cls.CKLINGNER, "c-klingner": cls.CKLINGNER,
            "cbna": cls.CBNA,
        }
        if key not in aliases:
            raise ValueError(f"unknown adaptation mode {name!r}")
        return aliases[key]


@dataclass(frozen=True)
class AdaptPolicy:
    mode: Mode = Mode.CBNA
    eta_s: float = DEFAULT_ETA
    window: int = 1

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        if not 0.0 <= self.eta_s <= 1.0:
            raise ValueError(f"eta_s must lie in [0, 1], got {self.eta_s}")
        if int(self.window) != self.window or self.window < 1:
            raise ValueError(f"window must be a positive integer, got {self.window}")


@dataclass
class FlopReport:
    stats_flops: int
    mixing_flops: int
    forward_flops: int
    passes: int
    mode: str = ""
    eta: float = 0.0
    window: int = 1

    @property
    def total_flops(self) -> int:
        return self.stats_flops + self.mixing_flops + self.forward_flops

    CSV_HEADER = ("mode", "eta", "window", "passes", "stats_flops", "mixing_flops", "forward_flops", "total_flops")

    def csv_row(self) -> tuple:
        return (self.mode, self.eta, self.window, self.passes, self.stats_flops, self.mixing_flops,
                self.forward_flops, self.total_flops)


def mix_stats(source: BatchStats, target: BatchStats, eta: float) -> BatchStats:
    """Element-wise blend of means and of variances (never of standard deviations)."""
    return BatchStats((1 - eta) * source.mean + eta * target.mean,
                      (1 - eta) * source.var + eta * target.var)


def pooled_target_stats(layer_input, window: int | None = None) -> BatchStats:
    """Statistics of ``window`` frames pooled over batch and spatial axes jointly."""
    layer_input = as_tensor(layer_input)
    if window is not None and layer_input.shape[0] != window:
        raise ValueError(f"expected {window} frames, got batch of {layer_input.shape[0]}")
    return compute_batch_stats(layer_input)


def _check(model: SegModel, policy: AdaptPolicy):
    if policy.mode is not Mode.NO_ADAPT and not model.bn_layers:
        raise ValueError(f"mode {policy.mode.value!r} needs a model with at least one BN layer")


def strategy_logits(model: SegModel, x, policy: AdaptPolicy, per_sample: bool = False) -> np.ndarray:
    """Logits under ``policy``. With ``per_sample`` every image of ``x`` is adapted
    on its own statistics; otherwise the whole batch is pooled."""
    _check(model, policy)
    mode, eta = policy.mode, policy.eta_s

    def target(features):
        return compute_batch_stats(features, per_sample=per_sample)

    if mode is Mode.NO_ADAPT:
        return run_logits(model, x, source_stats_provider)
    if mode is Mode.CLI:
        return run_logits(model, x, lambda i, layer, f: target(f))
    if mode is Mode.CBNA:
        return run_logits(model, x, lambda i, layer, f: mix_stats(layer.source_stats(), target(f), eta))

    recorded: list[BatchStats] = []

    def record(i, layer, f):
        stats = target(f)
        recorded.append(stats)
        return stats

    run_logits(model, x, record)
    return run_logits(model, x, lambda i, layer, f: mix_stats(layer.source_stats(), recorded[i], eta))


def _output(logits) -> SegOutput:
    post = softmax_channels(logits)
    return SegOutput(post, argmax_channels(post), logits)


def adapt_forward(model: SegModel, frames, policy: AdaptPolicy) -> tuple[SegOutput, FlopReport]:
    """Adapt to ``policy.window`` frames (current frame last) and segment the last one."""
    frames = as_tensor(frames)
    if frames.shape[0] != policy.window:
        raise ValueError(f"policy window {policy.window} but {frames.shape[0]} frames given")
    logits = strategy_logits(model, frames, policy)
    report = count_flops(model, policy, frames.shape[1:3])
    return _output(logits[-1:]), report


def adapt_batch(model: SegModel, images, policy: AdaptPolicy) -> SegOutput:
    """Single-image adaptation of every image in ``images`` in one vectorized pass.

    Equivalent to calling :func:`adapt_forward` with a window of one per image.
    """
    if policy.window != 1:
        raise ValueError("adapt_batch handles single-image adaptation only")
    return _output(strategy_logits(model, as_tensor(images), policy, per_sample=True))


def count_flops(model: SegModel, policy: AdaptPolicy, resolution) -> FlopReport:
    """Per-image FLOPs under a fixed counting convention.

    forward: conv 2*kh*kw*c_in per output element; BN apply 2, relu 1, average
    pooling 1 per input element; upsampling/concat free; softmax 3 per output.
    BN statistics: 4*N*H*W*C + 2*C with N the pooled frame count; mixing: 6*C.
    """
    policy = policy if isinstance(policy, AdaptPolicy) else AdaptPolicy(*policy)
    h, w = resolution
    c = 3
    fwd = stats = mixing = 0
    skips = []
    n = policy.window
    for layer in model.layers:
        kind = layer.kind
        if kind in ("conv", "head"):
            kh, kw, ci, co = layer.weights.shape
            h = conv_output_size(h, kh, layer.stride, layer.padding)
            w = conv_output_size(w, kw, layer.stride, layer.padding)
            c = co
            fwd += 2 * kh * kw * ci * h * w * co
        elif kind == "bn":
            fwd += 2 * h * w * c
            stats += 4 * n * h * w * c + 2 * c
            mixing += 6 * c
        elif kind == "relu":
            fwd += h * w * c
        elif kind == "down":
            fwd += h * w * c
            h, w = h // layer.factor, w // layer.factor
        elif kind == "up":
            h, w = h * layer.factor, w * layer.factor
        elif kind == "skip":
            skips.append(c)
        elif kind == "concat":
            c += skips.pop()
    fwd += 3 * h * w * c
    fwd *= n
    mode = policy.mode
    passes = 2 if mode is Mode.CKLINGNER else 1
    report = FlopReport(0, 0, fwd * passes, passes, mode.value, policy.eta_s, n)
    if mode in (Mode.CLI, Mode.CBNA, Mode.CKLINGNER):
        report.stats_flops = stats
    if mode in (Mode.CBNA, Mode.CKLINGNER):
        report.mixing_flops = mixing
    return report
