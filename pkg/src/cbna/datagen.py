"""Synthetic shape-segmentation scenes with parametric appearance shifts.

Classes: 0 background, 1 circle, 2 square, 3 triangle. A domain shift only
touches pixel values (brightness, contrast, per-channel gain, noise), so the
same seed yields the same label maps in every domain.

On-disk layout of a dataset directory::

    manifest.json     count, resolution, classes, scene and shift parameters
    img_%06d.bin      b"CBNA" + u32 H, W, C + little-endian f32 data (H, W, C)
    lbl_%06d.bin      b"CBNA" + u32 H, W + u8 class indices (H, W)
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"CBNA"
CLASS_NAMES = ("background", "circle", "square", "triangle")
# base colour per foreground class; every shape jitters around it
CLASS_COLORS = np.array([[0.85, 0.35, 0.30], [0.35, 0.80, 0.40], [0.35, 0.45, 0.85]])


@dataclass(frozen=True)
class SceneSpec:
    resolution: tuple = (64, 64)
    num_classes: int = 4
    min_shapes: int = 1
    max_shapes: int = 4
    seed: int = 0
    sequence_length: int = 1  # frames per clip; 1 means independent images
    color_jitter: float = 0.2
    min_radius: float = 6.0
    max_radius: float = 13.0
    speed: float = 1.5  # max shape displacement per frame, pixels

    def __post_init__(self):
        if self.num_classes != len(CLASS_NAMES):
            raise ValueError(f"the shape renderer draws exactly {len(CLASS_NAMES)} classes")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 1 <= min_shapes <= max_shapes")
        if self.sequence_length < 1:
            raise ValueError("sequence_length must be >= 1")


@dataclass(frozen=True)
class DomainShift:
    brightness_offset: float = 0.0
    contrast_gain: float = 1.0
    channel_gain: tuple = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not -0.5 <= self.brightness_offset <= 0.5:
            raise ValueError("brightness_offset must lie in [-0.5, 0.5]")
        if not 0 < self.contrast_gain <= 2:
            raise ValueError("contrast_gain must lie in (0, 2]")
        if len(self.channel_gain) != 3:
            raise ValueError("channel_gain needs three entries")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        object.__setattr__(self, "channel_gain", tuple(float(g) for g in self.channel_gain))

    def apply(self, image: np.ndarray, rng, clamp: bool = True) -> np.ndarray:
        """gain_c * (contrast * x + (1 - contrast) / 2 + brightness) + noise, clamped to [0, 1]."""
        x = image.astype(np.float32)
        c = np.float32(self.contrast_gain)
        y = x * c + np.float32((1 - self.contrast_gain) * 0.5) + np.float32(self.brightness_offset)
        y = y * np.asarray(self.channel_gain, np.float32)
        if self.noise_sigma > 0:
            y = y + (self.noise_sigma * rng.standard_normal(x.shape)).astype(np.float32)
        return np.clip(y, 0.0, 1.0).astype(np.float32) if clamp else y.astype(np.float32)


SHIFT_PRESETS = {
    "none": DomainShift(),
    "preset-night": DomainShift(-0.25, 0.7, (1.0, 0.85, 0.7), 0.02),
}


def shift_from_name(name: str) -> DomainShift:
    try:
        return SHIFT_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown shift preset {name!r}; choose from {sorted(SHIFT_PRESETS)}") from None


@dataclass(eq=False)
class Dataset:
    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (N, H, W) uint8
    spec: SceneSpec = field(default_factory=SceneSpec)
    shift: DomainShift = field(default_factory=DomainShift)

    def __len__(self):
        return len(self.images)

    @property
    def sequence_length(self) -> int:
        return self.spec.sequence_length

    def window(self, index: int, size: int) -> slice:
        """Frames pooled with frame ``index``: up to ``size - 1`` predecessors of the same clip."""
        start_of_clip = index - index % self.sequence_length
        return slice(max(start_of_clip, index - size + 1), index + 1)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.spec, self.shift)


def _rng(*key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


def _background(rng, h, w):
    base = rng.uniform(0.15, 0.55) + rng.uniform(-0.08, 0.08, size=3)
    angle = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.0, 0.2)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w) - 0.5
    ramp = amp * (np.cos(angle) * xx + np.sin(angle) * yy)
    return base + ramp[..., None]


def _shape_mask(cls, cy, cx, r, yy, xx):
    if cls == 1:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if cls == 2:
        s = r * 0.85
        return (np.abs(yy - cy) <= s) & (np.abs(xx - cx) <= s)
    # upright triangle inscribed in the circle of radius r
    top, base = cy - r, cy + r * 0.6
    half = (yy - top) / (base - top) * r * 0.95
    return (yy >= top) & (yy <= base) & (np.abs(xx - cx) <= half)


def _clip_shapes(rng, spec: SceneSpec):
    h, w = spec.resolution
    n = rng.integers(spec.min_shapes, spec.max_shapes + 1)
    shapes = []
    for _ in range(n):
        cls = int(rng.integers(1, 4))
        r = rng.uniform(spec.min_radius, spec.max_radius)
        cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
        vy, vx = rng.uniform(-spec.speed, spec.speed, size=2)
        color = np.clip(CLASS_COLORS[cls - 1] + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), 0.05, 1.0)
        shapes.append((cls, r, cy, cx, vy, vx, color))
    return shapes


def _render_frame(spec: SceneSpec, background, shapes, t, rng):
    h, w = spec.resolution
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = background.copy()
    lbl = np.zeros((h, w), np.uint8)
    for cls, r, cy, cx, vy, vx, color in shapes:
        py = np.clip(cy + vy * t, r, h - r)
        px = np.clip(cx + vx * t, r, w - r)
        mask = _shape_mask(cls, py, px, r, yy, xx)
        img[mask] = color
        lbl[mask] = cls
    img = img + rng.normal(0.0, 0.02, size=img.shape)  # sensor grain, part of every domain
    return np.clip(img, 0.0, 1.0).astype(np.float32), lbl


def render_scene(spec: SceneSpec, index: int):
    """Unshifted image and label map of sample ``index``."""
    clip, t = divmod(index, spec.sequence_length)
    geo = _rng(spec.seed, clip)
    h, w = spec.resolution
    background = _background(geo, h, w)
    shapes = _clip_shapes(geo, spec)
    return _render_frame(spec, background, shapes, t, _rng(spec.seed, clip, t, 1))


def generate(spec: SceneSpec, shift: DomainShift, n: int) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    h, w = spec.resolution
    images = np.empty((n, h, w, 3), np.float32)
    labels = np.empty((n, h, w), np.uint8)
    for i in range(n):
        img, lbl = render_scene(spec, i)
        images[i] = shift.apply(img, _rng(spec.seed, i, 2))
        labels[i] = lbl
    return Dataset(images, labels, spec, shift)


# -- binary IO ---------------------------------------------------------------

def _img_name(i):
    return f"img_{i:06d}.bin"


def _lbl_name(i):
    return f"lbl_{i:06d}.bin"


def write_dataset(ds: Dataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n, h, w, c = ds.images.shape
    manifest = {
        "count": n,
        "resolution": [h, w],
        "classes": list(CLASS_NAMES[:ds.spec.num_classes]),
        "spec": asdict(ds.spec),
        "shift": asdict(ds.shift),
    }
    for i in range(n):
        (d / _img_name(i)).write_bytes(MAGIC + struct.pack("<III", h, w, c)
                                       + np.ascontiguousarray(ds.images[i], "<f4").tobytes())
        (d / _lbl_name(i)).write_bytes(MAGIC + struct.pack("<II", h, w)
                                       + np.ascontiguousarray(ds.labels[i], np.uint8).tobytes())
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return d


def _read_payload(path: Path, header: str, itemsize: int):
    if not path.exists():
        raise FormatError(f"missing dataset file {path}")
    data = path.read_bytes()
    size = struct.calcsize(header)
    if len(data) < 4 + size or data[:4] != MAGIC:
        raise FormatError(f"bad header in {path}")
    dims = struct.unpack(header, data[4:4 + size])
    body = data[4 + size:]
    if len(body) != int(np.prod(dims)) * itemsize:
        raise FormatError(f"{path}: payload size {len(body)} does not match dims {dims}")
    return dims, body


def read_dataset(directory) -> Dataset:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"missing manifest {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
        n = int(manifest["count"])
        spec_fields = dict(manifest["spec"])
        spec_fields["resolution"] = tuple(spec_fields["resolution"])
        spec = SceneSpec(**spec_fields)
        shift = DomainShift(**manifest["shift"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid manifest {mpath}: {exc}") from exc
    for i in range(n):
        for name in (_img_name(i), _lbl_name(i)):
            if not (d / name).exists():
                raise FormatError(f"missing dataset file {d / name} (manifest count {n})")
    n_img, n_lbl = len(list(d.glob("img_*.bin"))), len(list(d.glob("lbl_*.bin")))
    if n_img != n or n_lbl != n:
        raise FormatError(f"manifest count {n} does not match {n_img} image / {n_lbl} label files in {d}")
    h, w = manifest["resolution"]
    images = np.empty((n, h, w, 3), np.float32)
    labels = np.empty((n, h, w), np.uint8)
    for i in range(n):
        dims, body = _read_payload(d / _img_name(i), "<III", 4)
        if dims != (h, w, 3):
            raise FormatError(f"{_img_name(i)} has dims {dims}, manifest says {(h, w, 3)}")
        images[i] = np.frombuffer(body, "<f4").reshape(dims)
        dims, body = _read_payload(d / _lbl_name(i), "<II", 1)
        if dims != (h, w):
            raise FormatError(f"{_lbl_name(i)} has dims {dims}, manifest says {(h, w)}")
        labels[i] = np.frombuffer(body, np.uint8).reshape(dims)
    return Dataset(images, labels, spec, shift)
