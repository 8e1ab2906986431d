"""mIoU metrics and the experiment drivers (eta sweep, window ablation, per-image histograms)."""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapt import AdaptPolicy, Mode, adapt_batch, adapt_forward
from .errors import MetricError, ShapeError
from .segnet import SegModel

ETA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(eq=False)
class ConfusionAccumulator:
    num_classes: int
    tp: np.ndarray = field(default=None)
    fp: np.ndarray = field(default=None)
    fn: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("tp", "fp", "fn"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.num_classes, np.uint64))

    def accumulate(self, pred, truth) -> "ConfusionAccumulator":
        pred, truth = np.asarray(pred), np.asarray(truth)
        if pred.shape != truth.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {truth.shape} differ")
        k = self.num_classes
        if pred.size and (pred.min() < 0 or truth.min() < 0 or pred.max() >= k or truth.max() >= k):
            raise ValueError(f"class indices must lie in [0, {k})")
        cm = np.bincount(truth.ravel().astype(np.int64) * k + pred.ravel(), minlength=k * k).reshape(k, k)
        diag = np.diag(cm)
        self.tp += diag.astype(np.uint64)
        self.fp += (cm.sum(axis=0) - diag).astype(np.uint64)
        self.fn += (cm.sum(axis=1) - diag).astype(np.uint64)
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        return ConfusionAccumulator(self.num_classes, self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN where TP + FP + FN == 0."""
        tp = self.tp.astype(np.float64)
        denom = tp + self.fp + self.fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / denom, np.nan)


def accumulate(acc: ConfusionAccumulator, pred, truth) -> ConfusionAccumulator:
    return acc.accumulate(pred, truth)


def miou(acc: ConfusionAccumulator, class_subset=None) -> float:
    """Mean IoU over ``class_subset`` (default all classes), skipping classes
    that appear in neither prediction nor ground truth."""
    ious = acc.iou()
    if class_subset is not None:
        ious = ious[list(class_subset)]
    ious = ious[~np.isnan(ious)]
    if ious.size == 0:
        raise MetricError("no class in the subset has any predicted or ground-truth pixel")
    return float(ious.mean())


# -- prediction ------------------------------------------------------------------

def predict(model: SegModel, data, policy: AdaptPolicy, batch_size: int = 32, jobs: int = 1) -> np.ndarray:
    """Class maps for every sample of ``data`` adapted under ``policy``.

    A window of one adapts each image on its own; larger windows pool each frame
    with its predecessors in the same clip (fewer at the start of a clip).
    """
    n = len(data.images)
    if policy.window == 1:
        chunks = [slice(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]
        work = lambda s: adapt_batch(model, data.images[s], policy).classes
    else:
        chunks = list(range(n))

        def work(i):
            frames = data.images[data.window(i, policy.window)]
            pol = AdaptPolicy(policy.mode, policy.eta_s, len(frames))
            return adapt_forward(model, frames, pol)[0].classes
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    return np.concatenate(parts).astype(np.uint8)


@dataclass
class EvalResult:
    policy: AdaptPolicy
    miou: float
    ious: np.ndarray
    acc: ConfusionAccumulator
    predictions: np.ndarray = field(repr=False)


def evaluate(model: SegModel, data, policy: AdaptPolicy, class_subset=None, jobs: int = 1) -> EvalResult:
    preds = predict(model, data, policy, jobs=jobs)
    acc = ConfusionAccumulator(model.num_classes).accumulate(preds, data.labels)
    return EvalResult(policy, miou(acc, class_subset), acc.iou(), acc, preds)


def per_image_miou(preds, labels, num_classes: int) -> np.ndarray:
    return np.array([miou(ConfusionAccumulator(num_classes).accumulate(p, t)) for p, t in zip(preds, labels)])


# -- drivers -----------------------------------------------------------------------

@dataclass
class SweepPoint:
    eta: float
    miou: float
    ious: np.ndarray


def sweep_eta(model: SegModel, data, grid=ETA_GRID, mode=Mode.CBNA, jobs: int = 1) -> list[SweepPoint]:
    if len(grid) == 0:
        raise ValueError("eta grid is empty")
    points = []
    for eta in grid:
        res = evaluate(model, data, AdaptPolicy(mode, float(eta)), jobs=jobs)
        points.append(SweepPoint(float(eta), res.miou, res.ious))
    return points


def select_eta(curves, grid=ETA_GRID) -> float:
    """Best eta per curve (ties to the smaller eta), averaged, then rounded to
    the nearest grid value (half-way to the smaller one).

    ``curves`` is a list of sequences of (eta, miou) pairs or SweepPoints.
    """
    if not curves:
        raise ValueError("need at least one curve")
    best = []
    for curve in curves:
        pairs = [(p.eta, p.miou) if isinstance(p, SweepPoint) else (float(p[0]), float(p[1])) for p in curve]
        top = max(m for _, m in pairs)
        best.append(min(e for e, m in pairs if m == top))
    mean = float(np.mean(best))
    grid = sorted(float(g) for g in grid)
    # the 1e-9 slack keeps float noise in the mean (0.1 + 0.3) / 2 from deciding a tie
    return min(grid, key=lambda g: (round(abs(g - mean), 9), g))


def ablate_window(model: SegModel, data, windows=(1, 2, 3, 4, 5), mode=Mode.CBNA, eta: float = 0.2,
                  jobs: int = 1) -> list[tuple[int, float]]:
    return [(int(dn), evaluate(model, data, AdaptPolicy(mode, eta, int(dn)), jobs=jobs).miou) for dn in windows]


@dataclass
class HistogramReport:
    modes: list
    per_image: dict  # label -> (N,) per-image mIoU
    deltas: np.ndarray  # adapted minus unadapted, per image
    abs_rows: list
    delta_rows: list

    @property
    def n_positive(self) -> int:
        return int(np.sum(self.deltas > 0))

    @property
    def n_negative(self) -> int:
        return int(np.sum(self.deltas < 0))


def _histogram(values, width, low, high):
    nbins = int(round((high - low) / width))
    idx = np.clip(np.floor((np.asarray(values) - low) / width + 1e-9).astype(int), 0, nbins - 1)
    return [low + i * width for i in range(nbins)], np.bincount(idx, minlength=nbins)


def per_image_miou_histogram(model: SegModel, data, policies, abs_width: float = 0.02,
                             delta_width: float = 0.01, jobs: int = 1) -> HistogramReport:
    """Per-image mIoU under each policy; deltas are last policy minus first."""
    policies = list(policies)
    labels = [f"{p.mode.value}" if p.mode is Mode.NO_ADAPT else f"{p.mode.value}@{p.eta_s:g}" for p in policies]
    per_image = {}
    for label, pol in zip(labels, policies):
        per_image[label] = per_image_miou(predict(model, data, pol, jobs=jobs), data.labels, model.num_classes)
    deltas = per_image[labels[-1]] - per_image[labels[0]]
    lows, _ = _histogram([], abs_width, 0.0, 1.0)
    counts = [_histogram(per_image[l], abs_width, 0.0, 1.0)[1] for l in labels]
    abs_rows = [(lo, *[int(c[i]) for c in counts]) for i, lo in enumerate(lows)]
    dlows, dcounts = _histogram(deltas, delta_width, -1.0, 1.0)
    delta_rows = [(lo, int(c)) for lo, c in zip(dlows, dcounts)]
    return HistogramReport(labels, per_image, deltas, abs_rows, delta_rows)


# -- csv -----------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.6g" % v
    return str(v)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path
