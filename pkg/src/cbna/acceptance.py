"""End-to-end acceptance suite, shared by ``cbna accept`` and the pytest suite.

Each criterion returns a :class:`CriterionResult`; the expensive desk-scale
setup (datasets, trained model, eta sweep) is built once per
:class:`AcceptanceContext` and cached under its work directory.
"""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path

import numpy as np

from .adapt import AdaptPolicy, Mode, adapt_forward, count_flops, pooled_target_stats
from .batchnorm import BatchStats, BnLayer, compute_batch_stats, update_running_stats
from .datagen import SceneSpec, generate, read_dataset, shift_from_name, write_dataset
from .errors import FormatError
from .evaluation import (ETA_GRID, ConfusionAccumulator, ablate_window, evaluate, miou,
                         per_image_miou_histogram, select_eta, sweep_eta)
from .segnet import Conv, Concat, Downsample, Head, ReLU, SegModel, Skip, Upsample, build_toy_model, \
    load_model, save_checkpoint, save_model
from .trainer import TrainConfig, check_gradients, train


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number}. {self.name}: {self.detail} ({self.seconds:.1f}s)"


@dataclass
class AcceptanceConfig:
    num_classes: int = 4
    model_seed: int = 7
    n_source: int = 400
    n_val: int = 200
    n_target: int = 200
    source_seed: int = 1
    val_seed: int = 2
    target_seed: int = 3
    target_sequence_length: int = 8
    target_shift: str = "preset-night"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, batch_size=8, lr=0.01, seed=0))
    windows: tuple = (1, 5)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True, default=str).encode()).hexdigest()[:12]


def _timed(number, name, fn, limit=None):
    t0 = time.perf_counter()
    passed, detail = fn()
    dt = time.perf_counter() - t0
    if limit is not None and dt >= limit:
        passed, detail = False, f"{detail}; runtime {dt:.1f}s exceeds {limit:g}s"
    return CriterionResult(number, name, bool(passed), detail, dt)


def _random_source_model(seed: int) -> SegModel:
    """Toy model whose BN layers carry non-trivial source statistics and affine parameters."""
    model = build_toy_model(4, seed)
    rng = np.random.default_rng(seed + 1)
    for layer in model.bn_layers:
        c = layer.channels
        layer.running_mean = rng.normal(0, 0.3, c).astype(np.float32)
        layer.running_var = rng.uniform(0.2, 2.0, c).astype(np.float32)
        layer.gamma = rng.uniform(0.5, 1.5, c).astype(np.float32)
        layer.beta = rng.normal(0, 0.2, c).astype(np.float32)
    return model


# -- criterion 1 -------------------------------------------------------------------

def check_limits(n_inputs: int = 50, seed: int = 11):
    model = _random_source_model(seed)
    rng = np.random.default_rng(seed)
    worst = {"cbna(1)~cli": 0.0, "cklingner(0)~none": 0.0, "cklingner(1)~cli": 0.0}
    exact = True
    for _ in range(n_inputs):
        x = rng.random((1, 64, 64, 3), dtype=np.float32)
        out = {name: adapt_forward(model, x, AdaptPolicy(mode, eta))[0].posteriors
               for name, mode, eta in [("none", Mode.NO_ADAPT, 0.0), ("cli", Mode.CLI, 0.0),
                                       ("cbna0", Mode.CBNA, 0.0), ("cbna1", Mode.CBNA, 1.0),
                                       ("ck0", Mode.CKLINGNER, 0.0), ("ck1", Mode.CKLINGNER, 1.0)]}
        exact &= np.array_equal(out["cbna0"], out["none"])
        worst["cbna(1)~cli"] = max(worst["cbna(1)~cli"], float(np.abs(out["cbna1"] - out["cli"]).max()))
        worst["cklingner(0)~none"] = max(worst["cklingner(0)~none"], float(np.abs(out["ck0"] - out["none"]).max()))
        worst["cklingner(1)~cli"] = max(worst["cklingner(1)~cli"], float(np.abs(out["ck1"] - out["cli"]).max()))
    passed = exact and all(v <= 1e-6 for v in worst.values())
    detail = f"cbna(0)==none bit-exact: {exact}; " + ", ".join(f"{k} max|d|={v:.2e}" for k, v in worst.items())
    return passed, detail


# -- criterion 2 -------------------------------------------------------------------

def check_statelessness(n_inferences: int = 100, seed: int = 12):
    model = _random_source_model(seed)
    before = save_checkpoint(model)
    rng = np.random.default_rng(seed)
    changed = []
    for mode in Mode:
        for _ in range(n_inferences):
            adapt_forward(model, rng.random((1, 64, 64, 3), dtype=np.float32), AdaptPolicy(mode, 0.5))
        if save_checkpoint(model) != before:
            changed.append(mode.value)
    return not changed, f"{n_inferences} inferences per mode; modes that altered the checkpoint: {changed or 'none'}"


# -- criterion 3 -------------------------------------------------------------------

def brute_force_stats(x) -> tuple[list[float], list[float]]:
    """Two-pass mean/variance over all (b, h, w) per channel with exact summation."""
    x = np.asarray(x, np.float64)
    b, h, w, c = x.shape
    means, vars_ = [], []
    for ch in range(c):
        vals = [float(x[i, j, k, ch]) for i in range(b) for j in range(h) for k in range(w)]
        m = math.fsum(vals) / len(vals)
        means.append(m)
        vars_.append(math.fsum((v - m) ** 2 for v in vals) / len(vals))
    return means, vars_


def _rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)))


def check_statistics(n_tensors: int = 200, seed: int = 13):
    rng = np.random.default_rng(seed)
    worst_batch = worst_pool = 0.0
    for _ in range(n_tensors):
        shape = tuple(int(v) for v in rng.integers(1, [7, 13, 13, 7]))
        x = (rng.normal(rng.normal(0, 3), rng.uniform(0.1, 4), size=shape)).astype(np.float32)
        bm, bv = brute_force_stats(x)
        s = compute_batch_stats(x)
        worst_batch = max(worst_batch, _rel_err(s.mean, bm), _rel_err(s.var, bv))
        p = pooled_target_stats(x, window=shape[0])
        worst_pool = max(worst_pool, _rel_err(p.mean, bm), _rel_err(p.var, bv))
    worst_ema = 0.0
    for _ in range(20):
        c = 4
        eta = float(rng.uniform(0, 1))
        k = int(rng.integers(1, 60))
        m0, v0 = rng.normal(0, 1, c), rng.uniform(0.1, 2, c)
        mt, vt = rng.normal(0, 1, c), rng.uniform(0.1, 2, c)
        layer = BnLayer(np.ones(c), np.zeros(c), m0.copy(), v0.copy(), momentum=eta)
        for _ in range(k):
            layer = update_running_stats(layer, BatchStats(mt, vt))
        decay = (1 - eta) ** k
        worst_ema = max(worst_ema, float(np.max(np.abs(layer.running_mean - (decay * m0 + (1 - decay) * mt)))),
                        float(np.max(np.abs(layer.running_var - (decay * v0 + (1 - decay) * vt)))))
    passed = worst_batch <= 1e-6 and worst_pool <= 1e-6 and worst_ema <= 1e-6
    return passed, (f"batch stats rel err {worst_batch:.2e}, pooled rel err {worst_pool:.2e}, "
                    f"running-stats vs closed form {worst_ema:.2e}")


# -- criterion 4 -------------------------------------------------------------------

def gradient_fragments(seed: int = 21) -> dict[str, tuple]:
    """Small models covering every parameterized layer kind, with inputs and labels."""
    rng = np.random.default_rng(seed)

    def conv(ci, co, k=3, cls=Conv):
        return cls(rng.uniform(-0.5, 0.5, (k, k, ci, co)).astype(np.float32),
                   rng.uniform(-0.1, 0.1, co).astype(np.float32))

    def bn(c):
        return BnLayer(rng.uniform(0.5, 1.5, c).astype(np.float32), rng.uniform(-0.2, 0.2, c).astype(np.float32),
                       np.zeros(c, np.float32), np.ones(c, np.float32))

    frags = {
        "conv+relu+head": SegModel([conv(3, 4), ReLU(), conv(4, 3, 1, Head)], 3),
        "conv+bn(train)+relu+head": SegModel([conv(3, 4), bn(4), ReLU(), conv(4, 3, 1, Head)], 3),
        "u-net fragment": SegModel([conv(3, 4), bn(4), ReLU(), Skip(), Downsample(2), conv(4, 4), bn(4), ReLU(),
                                    Upsample(2), Concat(), conv(8, 4), ReLU(), conv(4, 3, 1, Head)], 3),
    }
    out = {}
    for name, model in frags.items():
        x = rng.random((2, 8, 8, 3))
        y = rng.integers(0, 3, (2, 8, 8))
        out[name] = (model, x, y, np.array([1.0, 2.0, 0.5]))
    return out


def check_gradient_suite():
    errs = {name: check_gradients(m, x, y, w) for name, (m, x, y, w) in gradient_fragments().items()}
    return all(e < 1e-3 for e in errs.values()), ", ".join(f"{k} {v:.1e}" for k, v in errs.items())


# -- criterion 8 -------------------------------------------------------------------

def check_flops(resolution=(64, 64)):
    model = build_toy_model(4, 0)
    rep = {m: count_flops(model, AdaptPolicy(m, 0.2), resolution) for m in Mode}
    base = rep[Mode.NO_ADAPT].total_flops
    extra = {m: r.total_flops - base for m, r in rep.items()}
    six_c = sum(6 * layer.channels for layer in model.bn_layers)
    cbna = rep[Mode.CBNA]
    a = extra[Mode.CBNA] - extra[Mode.CLI] == six_c
    b = cbna.stats_flops / cbna.mixing_flops > 100
    c = rep[Mode.CKLINGNER].total_flops >= 2 * rep[Mode.NO_ADAPT].forward_flops
    detail = (f"extra(cbna)-extra(cli)={extra[Mode.CBNA] - extra[Mode.CLI]} vs sum 6C={six_c}; "
              f"stats/mixing={cbna.stats_flops / cbna.mixing_flops:.0f}; "
              f"cklingner total {rep[Mode.CKLINGNER].total_flops} vs 2x forward {2 * rep[Mode.NO_ADAPT].forward_flops}")
    return a and b and c, detail


# -- criterion 9 -------------------------------------------------------------------

def brute_force_miou(pred, truth, num_classes) -> float:
    """Set-based IoU per class over pixel coordinates; classes absent from both maps skipped."""
    coords = [(i, j) for i in range(pred.shape[0]) for j in range(pred.shape[1])]
    ious = []
    for s in range(num_classes):
        p = {ij for ij in coords if pred[ij] == s}
        t = {ij for ij in coords if truth[ij] == s}
        if p | t:
            ious.append(Fraction(len(p & t), len(p | t)))
    return sum(float(v) for v in ious) / len(ious)


def check_miou_oracle(n_pairs: int = 100, seed: int = 19):
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n_pairs):
        k = int(rng.integers(2, 6))
        pred, truth = rng.integers(0, k, (8, 8)), rng.integers(0, k, (8, 8))
        got = miou(ConfusionAccumulator(k).accumulate(pred, truth))
        if got != brute_force_miou(pred, truth, k):
            mismatches += 1
    return mismatches == 0, f"{n_pairs} random label-map pairs, {mismatches} mismatches"


# -- desk-scale experiment (criteria 5-7) ----------------------------------------------

class AcceptanceContext:
    def __init__(self, workdir, cfg: AcceptanceConfig | None = None, log=print):
        self.workdir = Path(workdir)
        self.cfg = cfg or AcceptanceConfig()
        self.log = log
        self.train_seconds = None

    def _dataset(self, name, seed, n, shift, sequence_length=1):
        path = self.workdir / "data" / name
        spec = SceneSpec(seed=seed, sequence_length=sequence_length, num_classes=self.cfg.num_classes)
        if (path / "manifest.json").exists():
            try:
                ds = read_dataset(path)
                if len(ds) == n and ds.spec == spec and ds.shift == shift:
                    return ds
            except FormatError:
                pass
        self.log(f"generating {name} split ({n} images) in {path}")
        ds = generate(spec, shift, n)
        write_dataset(ds, path)
        return ds

    @cached_property
    def source(self):
        return self._dataset("source", self.cfg.source_seed, self.cfg.n_source, shift_from_name("none"))

    @cached_property
    def val(self):
        return self._dataset("val", self.cfg.val_seed, self.cfg.n_val, shift_from_name("none"))

    @cached_property
    def target(self):
        return self._dataset("target", self.cfg.target_seed, self.cfg.n_target,
                             shift_from_name(self.cfg.target_shift), self.cfg.target_sequence_length)

    @cached_property
    def model(self) -> SegModel:
        ckpt = self.workdir / f"source_model_{self.cfg.digest()}.ckpt"
        if ckpt.exists():
            try:
                return load_model(ckpt)
            except FormatError:
                pass
        source = self.source
        self.log(f"training source model ({self.cfg.train.epochs} epochs on {len(source)} images)")
        t0 = time.perf_counter()
        model = train(build_toy_model(self.cfg.num_classes, self.cfg.model_seed), source, self.cfg.train)
        self.train_seconds = time.perf_counter() - t0
        save_model(model, ckpt)
        return model

    @cached_property
    def val_none(self) -> float:
        return evaluate(self.model, self.val, AdaptPolicy(Mode.NO_ADAPT)).miou

    @cached_property
    def sweep(self):
        return sweep_eta(self.model, self.target, ETA_GRID, Mode.CBNA)

    @cached_property
    def eta_star(self) -> float:
        return select_eta([self.sweep], ETA_GRID)

    def check_sweep(self):
        model = self.model
        curve = {p.eta: p.miou for p in self.sweep}
        none = curve[0.0]
        best = max(curve.values())
        interior = max(v for e, v in curve.items() if 0 < e < 1)
        a = self.val_none - none >= 0.05
        b = best - none >= 0.02
        c = interior > max(curve[0.0], curve[1.0])
        limit_ok = self.train_seconds is None or self.train_seconds <= 300
        detail = (f"val NoAdapt {self.val_none:.3f}, target NoAdapt {none:.3f} (drop {self.val_none - none:+.3f}); "
                  f"best CBNA {best:.3f} (gain {best - none:+.3f}); interior max {interior:.3f} vs "
                  f"eta=0 {curve[0.0]:.3f}, eta=1 {curve[1.0]:.3f}")
        if self.train_seconds is not None:
            detail += f"; training {self.train_seconds:.0f}s"
        return a and b and c and limit_ok and model is not None, detail

    def check_window(self):
        lo, hi = self.cfg.windows
        curve = dict(ablate_window(self.model, self.target, self.cfg.windows, Mode.CBNA, self.eta_star))
        diff = curve[hi] - curve[lo]
        return abs(diff) <= 0.02, (f"eta*={self.eta_star:g}: mIoU(dN={lo}) {curve[lo]:.4f}, "
                                   f"mIoU(dN={hi}) {curve[hi]:.4f}, diff {diff:+.4f}")

    def check_histogram(self):
        rep = per_image_miou_histogram(self.model, self.target,
                                       [AdaptPolicy(Mode.NO_ADAPT), AdaptPolicy(Mode.CBNA, self.eta_star)])
        return rep.n_positive > rep.n_negative, (f"eta*={self.eta_star:g}: {rep.n_positive} images improve, "
                                                 f"{rep.n_negative} degrade, {len(rep.deltas) - rep.n_positive - rep.n_negative} unchanged")


CRITERIA = {
    1: ("algebraic limit suite", 10.0),
    2: ("statelessness", 10.0),
    3: ("statistics oracles", 5.0),
    4: ("gradient check", 30.0),
    5: ("eta sweep: degradation, recovery, interior maximum", None),
    6: ("window ablation dN=5 vs dN=1", 120.0),
    7: ("per-image improvements outnumber degradations", None),
    8: ("FLOP accounting structure", None),
    9: ("mIoU vs set-based oracle", None),
}


def run_criterion(number: int, ctx: AcceptanceContext | None = None) -> CriterionResult:
    name, limit = CRITERIA[number]
    fn = {
        1: check_limits,
        2: check_statelessness,
        3: check_statistics,
        4: check_gradient_suite,
        5: lambda: ctx.check_sweep(),
        6: lambda: ctx.check_window(),
        7: lambda: ctx.check_histogram(),
        8: check_flops,
        9: check_miou_oracle,
    }[number]
    if number in (5, 6, 7) and ctx is not None:
        # shared setup is not charged to the criterion's own runtime budget
        _ = ctx.model if number == 5 else ctx.eta_star
    return _timed(number, name, fn, limit)


def run_acceptance(workdir, cfg: AcceptanceConfig | None = None, log=print) -> list[CriterionResult]:
    ctx = AcceptanceContext(workdir, cfg, log)
    results = []
    for number in CRITERIA:
        res = run_criterion(number, ctx)
        log(res.line())
        results.append(res)
    return results
