import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import cbna.adapt as adapt
from cbna.acceptance import check_limits
from cbna.adapt import (AdaptPolicy, FlopReport, Mode, adapt_batch, adapt_forward, count_flops, mix_stats,
                        pooled_target_stats, strategy_logits)
from cbna.batchnorm import BatchStats, BnLayer, compute_batch_stats
from cbna.segnet import Conv, Head, ReLU, SegModel, build_toy_model, save_checkpoint
from cbna.tensor import conv2d


def image(rng, b=1, size=16):
    return rng.random((b, size, size, 3), dtype=np.float32)


def two_bn_model(seed=3):
    r = np.random.default_rng(seed)
    conv = lambda ci, co, k=3, cls=Conv: cls(r.uniform(-.5, .5, (k, k, ci, co)), r.uniform(-.1, .1, co))
    bn = lambda c: BnLayer(r.uniform(.5, 1.5, c), r.normal(0, .2, c), r.normal(0, .5, c), r.uniform(.3, 2, c))
    return SegModel([conv(3, 4), bn(4), ReLU(), conv(4, 5), bn(5), ReLU(), conv(5, 3, 1, Head)], 3)


def test_policy_validation():
    with pytest.raises(ValueError):
        AdaptPolicy(Mode.CBNA, eta_s=1.5)
    with pytest.raises(ValueError):
        AdaptPolicy(Mode.CBNA, window=0)
    with pytest.raises(ValueError):
        AdaptPolicy("bogus")
    assert AdaptPolicy("czhang").mode is Mode.CLI
    assert AdaptPolicy("C-Klingner").mode is Mode.CKLINGNER
    assert AdaptPolicy().eta_s == 0.2 and AdaptPolicy().mode is Mode.CBNA


@pytest.mark.parametrize("mode", list(Mode))
def test_determinism_and_statelessness(source_model, rng, mode):
    x = image(rng)
    before = save_checkpoint(source_model)
    a, rep = adapt_forward(source_model, x, AdaptPolicy(mode, 0.4))
    b, _ = adapt_forward(source_model, x, AdaptPolicy(mode, 0.4))
    assert np.array_equal(a.posteriors, b.posteriors)
    assert save_checkpoint(source_model) == before
    assert rep.passes == (2 if mode is Mode.CKLINGNER else 1)


def test_limit_equivalences(source_model, rng):
    x = image(rng, size=32)
    run = lambda mode, eta: adapt_forward(source_model, x, AdaptPolicy(mode, eta))[0].posteriors
    none, cli = run(Mode.NO_ADAPT, 0.0), run(Mode.CLI, 0.0)
    assert np.array_equal(run(Mode.CBNA, 0.0), none)
    np.testing.assert_allclose(run(Mode.CBNA, 1.0), cli, atol=1e-6)
    np.testing.assert_allclose(run(Mode.CKLINGNER, 1.0), cli, atol=1e-6)
    np.testing.assert_allclose(run(Mode.CKLINGNER, 0.0), none, atol=1e-6)
    # the interior of the mixture is a genuinely different operating point
    assert not np.allclose(run(Mode.CBNA, 0.5), none, atol=1e-4)
    assert not np.allclose(run(Mode.CBNA, 0.5), run(Mode.CKLINGNER, 0.5), atol=1e-6)


def test_limits_criterion_catches_a_broken_mixture(monkeypatch):
    assert check_limits(n_inputs=2)[0]
    # swapped blend weights: the eta=0 / eta=1 identities must break
    monkeypatch.setattr(adapt, "mix_stats", lambda s, t, eta: BatchStats(
        (1 - eta) * t.mean + eta * s.mean, (1 - eta) * t.var + eta * s.var))
    assert not check_limits(n_inputs=2)[0]


def test_per_image_independence(source_model, rng):
    a, b = image(rng), image(rng)
    pol = AdaptPolicy(Mode.CBNA, 0.3)
    adapt_forward(source_model, a, pol)
    after_a = adapt_forward(source_model, b, pol)[0].posteriors
    alone = adapt_forward(source_model, b, pol)[0].posteriors
    assert np.array_equal(after_a, alone)


@pytest.mark.parametrize("mode", list(Mode))
def test_adapt_batch_matches_single_calls(source_model, rng, mode):
    x = image(rng, b=3)
    pol = AdaptPolicy(mode, 0.35)
    batched = adapt_batch(source_model, x, pol).posteriors
    for i in range(3):
        single = adapt_forward(source_model, x[i:i + 1], pol)[0].posteriors
        np.testing.assert_allclose(batched[i:i + 1], single, atol=1e-6)


def test_concurrent_evaluation_is_safe(source_model, rng):
    xs = [image(rng) for _ in range(6)]
    pol = AdaptPolicy(Mode.CBNA, 0.5)
    expected = [adapt_forward(source_model, x, pol)[0].posteriors for x in xs]
    got = [None] * len(xs)

    def work(i):
        got[i] = adapt_forward(source_model, xs[i], pol)[0].posteriors

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(xs))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for e, g in zip(expected, got):
        assert np.array_equal(e, g)


def _norm(f, mean, var, layer):
    return layer.gamma * (f - mean) / np.sqrt(var + layer.eps) + layer.beta


@pytest.mark.parametrize("eta", [0.0, 0.3, 0.75, 1.0])
def test_cbna_matches_hand_rolled_reference(rng, eta):
    model = two_bn_model().astype(np.float64)
    conv1, bn1, _, conv2, bn2, _, head = model.layers
    x = rng.random((1, 8, 8, 3))

    def mixed(f, layer):
        m, v = f.mean(axis=(0, 1, 2)), f.var(axis=(0, 1, 2))
        return (1 - eta) * layer.running_mean + eta * m, (1 - eta) * layer.running_var + eta * v

    f1 = conv2d(x, conv1.kernel())
    h1 = np.maximum(_norm(f1, *mixed(f1, bn1), bn1), 0)
    f2 = conv2d(h1, conv2.kernel())
    m2, v2 = mixed(f2, bn2)
    ref = conv2d(np.maximum(_norm(f2, m2, v2, bn2), 0), head.kernel())

    got = strategy_logits(model, x, AdaptPolicy(Mode.CBNA, eta))
    np.testing.assert_allclose(got, ref, rtol=1e-6, atol=1e-6)

    # the statistics used at layer 2 are the hand-rolled ones
    seen = []
    orig = adapt.mix_stats

    def spy(s, t, e):
        out = orig(s, t, e)
        seen.append(out)
        return out

    adapt.mix_stats, saved = spy, adapt.mix_stats
    try:
        strategy_logits(model, x, AdaptPolicy(Mode.CBNA, eta))
    finally:
        adapt.mix_stats = saved
    np.testing.assert_allclose(seen[1].mean, m2, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(seen[1].var, v2, rtol=1e-6, atol=1e-9)


def test_cklingner_records_cli_statistics(rng):
    model = two_bn_model().astype(np.float64)
    conv1, bn1, _, conv2, bn2, _, head = model.layers
    x = rng.random((1, 8, 8, 3))
    eta = 0.4
    f1 = conv2d(x, conv1.kernel())
    s1 = f1.mean(axis=(0, 1, 2)), f1.var(axis=(0, 1, 2))
    f2 = conv2d(np.maximum(_norm(f1, *s1, bn1), 0), conv2.kernel())
    s2 = f2.mean(axis=(0, 1, 2)), f2.var(axis=(0, 1, 2))
    mix = lambda layer, s: ((1 - eta) * layer.running_mean + eta * s[0], (1 - eta) * layer.running_var + eta * s[1])
    g1 = conv2d(x, conv1.kernel())
    g2 = conv2d(np.maximum(_norm(g1, *mix(bn1, s1), bn1), 0), conv2.kernel())
    ref = conv2d(np.maximum(_norm(g2, *mix(bn2, s2), bn2), 0), head.kernel())
    np.testing.assert_allclose(strategy_logits(model, x, AdaptPolicy(Mode.CKLINGNER, eta)), ref, rtol=1e-6, atol=1e-6)


def test_mix_blends_variances_not_deviations():
    out = mix_stats(BatchStats(np.zeros(1), np.zeros(1)), BatchStats(np.ones(1), np.full(1, 4.0)), 0.5)
    assert out.mean[0] == 0.5 and out.var[0] == 2.0  # std blending would give 1.0


@settings(max_examples=40, deadline=None)
@given(eta=st.floats(0, 1), seed=st.integers(0, 2**31))
def test_mixture_stays_between_endpoints(eta, seed):
    r = np.random.default_rng(seed)
    s = BatchStats(r.normal(size=3), r.uniform(0, 2, 3))
    t = BatchStats(r.normal(size=3), r.uniform(0, 2, 3))
    m = mix_stats(s, t, eta)
    lo, hi = np.minimum(s.var, t.var), np.maximum(s.var, t.var)
    assert np.all(m.var >= lo - 1e-12) and np.all(m.var <= hi + 1e-12)


def test_pooled_stats_examples(rng):
    x = rng.normal(size=(1, 4, 4, 3))
    one = compute_batch_stats(x)
    p = pooled_target_stats(x, window=1)
    assert np.array_equal(p.mean, one.mean) and np.array_equal(p.var, one.var)
    dup = pooled_target_stats(np.concatenate([x, x]), window=2)
    np.testing.assert_allclose(dup.mean, one.mean, rtol=1e-12)
    np.testing.assert_allclose(dup.var, one.var, rtol=1e-12)
    p = pooled_target_stats(np.stack([np.zeros((3, 3, 1)), np.full((3, 3, 1), 2.0)]), window=2)
    np.testing.assert_allclose(p.mean, [1.0])
    np.testing.assert_allclose(p.var, [1.0])
    with pytest.raises(ValueError):
        pooled_target_stats(x, window=2)


def test_window_pools_frames(source_model, rng):
    frames = image(rng, b=3)
    out, rep = adapt_forward(source_model, frames, AdaptPolicy(Mode.CLI, window=3))
    assert out.posteriors.shape[0] == 1 and rep.window == 3
    joint = strategy_logits(source_model, frames, AdaptPolicy(Mode.CLI))[-1:]
    np.testing.assert_array_equal(out.logits, joint)
    with pytest.raises(ValueError):
        adapt_forward(source_model, frames, AdaptPolicy(Mode.CLI, window=2))
    with pytest.raises(ValueError):
        adapt_batch(source_model, frames, AdaptPolicy(Mode.CLI, window=3))


def test_model_without_bn_rejects_adaptation(rng):
    r = np.random.default_rng(0)
    model = SegModel([Conv(r.normal(size=(3, 3, 3, 4)), np.zeros(4)), ReLU(),
                      Head(r.normal(size=(1, 1, 4, 2)), np.zeros(2))], 2)
    adapt_forward(model, image(rng), AdaptPolicy(Mode.NO_ADAPT))
    for mode in (Mode.CLI, Mode.CKLINGNER, Mode.CBNA):
        with pytest.raises(ValueError):
            adapt_forward(model, image(rng), AdaptPolicy(mode))


def one_bn_model(c=2):
    return SegModel([Conv(np.zeros((1, 1, 3, c)), np.zeros(c)), BnLayer.fresh(c),
                     Head(np.zeros((1, 1, c, 2)), np.zeros(2))], 2)


def test_flop_examples():
    rep = count_flops(one_bn_model(), AdaptPolicy(Mode.CLI), (4, 4))
    assert rep.stats_flops == 4 * 4 * 4 * 2 + 2 * 2 == 132 and rep.mixing_flops == 0
    none = count_flops(one_bn_model(), AdaptPolicy(Mode.NO_ADAPT), (4, 4))
    assert none.stats_flops == none.mixing_flops == 0 and none.passes == 1
    # 1x1 conv 3->2: 2*3 per output (32 outputs), BN 2/elem, head 2*2 per output (32), softmax 3/elem
    assert none.forward_flops == 2 * 3 * 32 + 2 * 32 + 2 * 2 * 32 + 3 * 32
    cb = count_flops(one_bn_model(), AdaptPolicy(Mode.CBNA), (4, 4))
    assert cb.mixing_flops == 12 and cb.total_flops == none.total_flops + 132 + 12


def test_flop_relations_on_toy_model():
    model = build_toy_model()
    rep = {m: count_flops(model, AdaptPolicy(m), (64, 64)) for m in Mode}
    six_c = sum(6 * b.channels for b in model.bn_layers)
    assert rep[Mode.CBNA].stats_flops == rep[Mode.CLI].stats_flops
    assert rep[Mode.CBNA].total_flops - rep[Mode.CLI].total_flops == six_c
    ck = rep[Mode.CKLINGNER]
    assert ck.passes == 2 and ck.forward_flops == 2 * rep[Mode.NO_ADAPT].forward_flops
    # stats scale with H*W*C, mixing with C: smallest BN map here is 16x16
    assert rep[Mode.CBNA].stats_flops / rep[Mode.CBNA].mixing_flops >= (2 / 3) * 16 * 16
    win = count_flops(model, AdaptPolicy(Mode.CLI, window=5), (64, 64))
    assert win.forward_flops == 5 * rep[Mode.CLI].forward_flops


def test_flop_report_csv():
    rep = FlopReport(1, 2, 3, 1, "cbna", 0.2, 1)
    assert rep.total_flops == 6
    assert dict(zip(FlopReport.CSV_HEADER, rep.csv_row()))["total_flops"] == 6
    assert FlopReport.CSV_HEADER == ("mode", "eta", "window", "passes", "stats_flops", "mixing_flops",
                                     "forward_flops", "total_flops")
