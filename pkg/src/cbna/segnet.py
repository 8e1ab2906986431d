"""Toy U-Net-shaped segmentation network with BN layers in the encoder only.

A model is an ordered list of layer descriptors that :func:`forward` interprets.
BN layers ask a *statistics provider* which mean/variance to normalize with;
this hook is how the adaptation strategies plug in.

Checkpoint layout (all little-endian)::

    b"CBNA"  u32 version  u32 num_classes  u64 seed  u32 encoder_depth  u32 n_layers
    per layer: u8 kind code, then
        conv(1)/head(8): u32 kh, kw, c_in, c_out, stride; u8 padding (0 same, 1 valid);
                         f32[kh*kw*c_in*c_out] weights; f32[c_out] bias
        bn(2):           u32 C; f64 eps; f64 momentum; f32[C] gamma, beta, running_mean, running_var
        down(4)/up(5):   u32 factor
        relu(3), skip(6), concat(7): no payload
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .batchnorm import BatchStats, BnLayer, normalize
from .errors import FormatError, ShapeError
from .tensor import DTYPE, ConvKernel, argmax_channels, as_tensor, conv2d, downsample_avg, relu, \
    softmax_channels, upsample_nearest

MAGIC = b"CBNA"
CHECKPOINT_VERSION = 1
INPUT_SIZE = 64


@dataclass(eq=False)
class Conv:
    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: str = "same"

    kind = "conv"

    def kernel(self) -> ConvKernel:
        return ConvKernel(self.weights, self.bias, self.stride, self.padding)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]


@dataclass(eq=False)
class Head(Conv):
    """Final 1x1 convolution producing class logits."""

    kind = "head"


@dataclass(eq=False)
class ReLU:
    kind = "relu"


@dataclass(eq=False)
class Downsample:
    factor: int = 2
    kind = "down"


@dataclass(eq=False)
class Upsample:
    factor: int = 2
    kind = "up"


@dataclass(eq=False)
class Skip:
    """Remembers the current features for the matching :class:`Concat`."""

    kind = "skip"


@dataclass(eq=False)
class Concat:
    """Concatenates [decoder features, most recent unconsumed skip] on channels."""

    kind = "concat"


@dataclass(eq=False)
class SegModel:
    layers: list
    num_classes: int
    seed: int = 0
    encoder_depth: int = 0

    def __post_init__(self):
        kinds = [layer.kind for layer in self.layers]
        if not kinds or kinds[-1] != "head":
            raise ShapeError("the last layer must be the classification head")
        if self.layers[-1].out_channels != self.num_classes:
            raise ShapeError("head output channels must equal num_classes")
        if "up" in kinds and "bn" in kinds[kinds.index("up"):]:
            raise ShapeError("BN layers are only allowed in the encoder")
        if kinds.count("skip") != kinds.count("concat"):
            raise ShapeError("every skip needs a matching concat")

    @property
    def bn_layers(self) -> list[BnLayer]:
        return [layer for layer in self.layers if layer.kind == "bn"]

    def astype(self, dtype) -> "SegModel":
        """Deep copy with every parameter array cast to ``dtype``."""
        layers = []
        for layer in self.layers:
            if layer.kind in ("conv", "head"):
                layer = replace(layer, weights=layer.weights.astype(dtype), bias=layer.bias.astype(dtype))
            elif layer.kind == "bn":
                layer = replace(layer, **{k: getattr(layer, k).astype(dtype) for k in BN_ARRAYS})
            else:
                layer = replace(layer)
            layers.append(layer)
        return replace(self, layers=layers)

    def copy(self) -> "SegModel":
        return self.astype(self.layers[-1].weights.dtype)


BN_ARRAYS = ("gamma", "beta", "running_mean", "running_var")


@dataclass(eq=False)
class SegOutput:
    posteriors: np.ndarray  # (B, H, W, S)
    classes: np.ndarray  # (B, H, W)
    logits: np.ndarray = field(default=None, repr=False)


StatsProvider = Callable[[int, BnLayer, np.ndarray], BatchStats]


def source_stats_provider(index: int, layer: BnLayer, features: np.ndarray) -> BatchStats:
    return layer.source_stats()


def _uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


def _conv(rng, k, c_in, c_out, cls=Conv):
    return cls(_uniform(rng, (k, k, c_in, c_out), k * k * c_in), np.zeros(c_out, DTYPE))


def build_toy_model(num_classes: int = 4, seed: int = 0, widths=(8, 16, 32), in_channels: int = 3) -> SegModel:
    """Encoder [conv3x3, BN, relu, skip, 2x down] per width; mirrored decoder
    [2x up, concat skip, conv3x3, relu]; 1x1 head.

    Weights are He-uniform draws from numpy's PCG64 generator seeded with ``seed``.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    rng = np.random.Generator(np.random.PCG64(seed))
    layers = []
    c = in_channels
    for w in widths:
        layers += [_conv(rng, 3, c, w), BnLayer.fresh(w), ReLU(), Skip(), Downsample(2)]
        c = w
    for w in reversed(widths):
        layers += [Upsample(2), Concat(), _conv(rng, 3, c + w, w), ReLU()]
        c = w
    layers.append(_conv(rng, 1, c, num_classes, Head))
    return SegModel(layers, num_classes, seed, len(widths))


def run_logits(model: SegModel, x, provider: StatsProvider = source_stats_provider) -> np.ndarray:
    x = as_tensor(x)
    skips = []
    bn_index = 0
    for layer in model.layers:
        kind = layer.kind
        if kind in ("conv", "head"):
            x = conv2d(x, layer.kernel())
        elif kind == "bn":
            x = normalize(x, provider(bn_index, layer, x), layer)
            bn_index += 1
        elif kind == "relu":
            x = relu(x)
        elif kind == "down":
            x = downsample_avg(x, layer.factor)
        elif kind == "up":
            x = upsample_nearest(x, layer.factor)
        elif kind == "skip":
            skips.append(x)
        elif kind == "concat":
            skip = skips.pop()
            if skip.shape[:3] != x.shape[:3]:
                raise ShapeError(f"skip {skip.shape} does not match decoder features {x.shape}")
            x = np.concatenate([x, skip], axis=3)
        else:
            raise ShapeError(f"unknown layer kind {kind!r}")
    return x


def forward(model: SegModel, x, provider: StatsProvider = source_stats_provider) -> SegOutput:
    x = as_tensor(x)
    if x.shape[3] != 3:
        raise ShapeError(f"expected a 3-channel image batch, got {x.shape}")
    logits = run_logits(model, x, provider)
    post = softmax_channels(logits)
    return SegOutput(post, argmax_channels(post), logits)


# -- checkpoints ---------------------------------------------------------------

_CODES = {"conv": 1, "bn": 2, "relu": 3, "down": 4, "up": 5, "skip": 6, "concat": 7, "head": 8}
_SIMPLE = {3: ReLU, 6: Skip, 7: Concat}


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def save_checkpoint(model: SegModel) -> bytes:
    out = [MAGIC, struct.pack("<IIQII", CHECKPOINT_VERSION, model.num_classes, model.seed,
                              model.encoder_depth, len(model.layers))]
    for layer in model.layers:
        out.append(struct.pack("<B", _CODES[layer.kind]))
        if layer.kind in ("conv", "head"):
            kh, kw, ci, co = layer.weights.shape
            out.append(struct.pack("<IIIIIB", kh, kw, ci, co, layer.stride, 0 if layer.padding == "same" else 1))
            out.append(_f32(layer.weights))
            out.append(_f32(layer.bias))
        elif layer.kind == "bn":
            out.append(struct.pack("<Idd", layer.channels, layer.eps, layer.momentum))
            out.extend(_f32(getattr(layer, k)) for k in BN_ARRAYS)
        elif layer.kind in ("down", "up"):
            out.append(struct.pack("<I", layer.factor))
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint truncated at byte {self.pos} (need {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(DTYPE)


def load_checkpoint(data: bytes) -> SegModel:
    r = _Reader(data)
    if bytes(r.take(4)) != MAGIC:
        raise FormatError("bad checkpoint magic")
    version, num_classes, seed, depth, n_layers = r.unpack("<IIQII")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    layers = []
    for _ in range(n_layers):
        (code,) = r.unpack("<B")
        if code in (1, 8):
            kh, kw, ci, co, stride, pad = r.unpack("<IIIIIB")
            w = r.floats(kh * kw * ci * co).reshape(kh, kw, ci, co)
            b = r.floats(co)
            layers.append((Conv if code == 1 else Head)(w, b, stride, "same" if pad == 0 else "valid"))
        elif code == 2:
            c, eps, momentum = r.unpack("<Idd")
            arrays = [r.floats(c) for _ in BN_ARRAYS]
            layers.append(BnLayer(*arrays, eps=eps, momentum=momentum))
        elif code in (4, 5):
            (factor,) = r.unpack("<I")
            layers.append((Downsample if code == 4 else Upsample)(factor))
        elif code in _SIMPLE:
            layers.append(_SIMPLE[code]())
        else:
            raise FormatError(f"unknown layer code {code}")
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes after checkpoint")
    try:
        return SegModel(layers, num_classes, seed, depth)
    except (ShapeError, ValueError) as exc:
        raise FormatError(f"inconsistent checkpoint: {exc}") from exc


def save_model(model: SegModel, path) -> None:
    Path(path).write_bytes(save_checkpoint(model))


def load_model(path) -> SegModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return load_checkpoint(data)


def models_equal(a: SegModel, b: SegModel) -> bool:
    return save_checkpoint(a) == save_checkpoint(b)
