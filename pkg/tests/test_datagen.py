import json

import numpy as np
import pytest

from cbna.datagen import (SHIFT_PRESETS, DomainShift, SceneSpec, generate, read_dataset, render_scene,
                          shift_from_name, write_dataset)
from cbna.errors import FormatError

SPEC = SceneSpec(resolution=(32, 32), min_radius=4, max_radius=8, seed=11)


def test_identity_shift_is_bit_exact():
    ds = generate(SPEC, DomainShift(), 4)
    for i in range(4):
        img, lbl = render_scene(SPEC, i)
        assert np.array_equal(ds.images[i], img)
        assert np.array_equal(ds.labels[i], lbl)


def test_same_seed_same_dataset():
    a = generate(SPEC, shift_from_name("preset-night"), 5)
    b = generate(SPEC, shift_from_name("preset-night"), 5)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    c = generate(SceneSpec(resolution=(32, 32), min_radius=4, max_radius=8, seed=12), DomainShift(), 5)
    assert not np.array_equal(a.labels, c.labels)


def test_brightness_offset_moves_mean_before_clamp(rng):
    img = rng.uniform(0.2, 0.8, (16, 16, 3)).astype(np.float32)
    out = DomainShift(brightness_offset=-0.3).apply(img, rng, clamp=False)
    assert out.mean() == pytest.approx(img.mean() - 0.3, abs=1e-6)
    clamped = DomainShift(brightness_offset=-0.3).apply(img, rng)
    assert clamped.min() >= 0.0 and clamped.max() <= 1.0


def test_contrast_and_channel_gain(rng):
    img = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
    out = DomainShift(contrast_gain=0.5, channel_gain=(1.0, 0.5, 0.25)).apply(img, rng, clamp=False)
    np.testing.assert_allclose(out, (0.5 * img + 0.25) * np.array([1.0, 0.5, 0.25]), atol=1e-6)


def test_shift_validation():
    with pytest.raises(ValueError):
        DomainShift(brightness_offset=0.7)
    with pytest.raises(ValueError):
        DomainShift(contrast_gain=0.0)
    with pytest.raises(ValueError):
        DomainShift(noise_sigma=-1)
    with pytest.raises(ValueError):
        shift_from_name("dusk")
    assert SHIFT_PRESETS["preset-night"] == DomainShift(-0.25, 0.7, (1.0, 0.85, 0.7), 0.02)


def test_labels_invariant_across_shifts():
    a = generate(SPEC, DomainShift(), 6)
    b = generate(SPEC, shift_from_name("preset-night"), 6)
    assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, b.images)
    for k in range(4):
        assert np.count_nonzero(a.labels == k) == np.count_nonzero(b.labels == k)


def test_every_map_has_background_and_foreground():
    ds = generate(SceneSpec(seed=5), DomainShift(), 30)
    assert ds.images.dtype == np.float32 and ds.labels.dtype == np.uint8
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    for lbl in ds.labels:
        present = set(np.unique(lbl))
        assert 0 in present and present - {0}
        assert max(present) < 4


def test_video_clips_share_geometry():
    spec = SceneSpec(resolution=(32, 32), min_radius=4, max_radius=8, seed=2, sequence_length=4, speed=1.0)
    ds = generate(spec, DomainShift(), 8)
    # frames of a clip move slowly, clips differ
    same_clip = np.mean(ds.labels[0] == ds.labels[1])
    other_clip = np.mean(ds.labels[3] == ds.labels[4])
    assert same_clip > 0.9 and same_clip > other_clip
    assert ds.window(5, 3) == slice(4, 6)  # clipped at the clip start
    assert ds.window(7, 3) == slice(5, 8)
    assert ds.window(0, 1) == slice(0, 1)


def test_round_trip(tmp_path):
    ds = generate(SPEC, shift_from_name("preset-night"), 3)
    write_dataset(ds, tmp_path / "d")
    again = read_dataset(tmp_path / "d")
    assert np.array_equal(again.images, ds.images) and np.array_equal(again.labels, ds.labels)
    assert again.spec == ds.spec and again.shift == ds.shift
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["count"] == 3 and manifest["resolution"] == [32, 32]
    raw = (tmp_path / "d" / "img_000000.bin").read_bytes()
    assert raw[:4] == b"CBNA" and len(raw) == 4 + 12 + 32 * 32 * 3 * 4


def test_missing_label_file_named(tmp_path):
    write_dataset(generate(SPEC, DomainShift(), 3), tmp_path)
    (tmp_path / "lbl_000001.bin").unlink()
    with pytest.raises(FormatError, match="lbl_000001.bin"):
        read_dataset(tmp_path)


def test_count_mismatch(tmp_path):
    write_dataset(generate(SPEC, DomainShift(), 3), tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["count"] = 2
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(FormatError, match="count"):
        read_dataset(tmp_path)


def test_corrupt_payload(tmp_path):
    write_dataset(generate(SPEC, DomainShift(), 2), tmp_path)
    p = tmp_path / "img_000001.bin"
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(FormatError):
        read_dataset(tmp_path)
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "nowhere")
