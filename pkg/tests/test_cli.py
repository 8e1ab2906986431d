import csv
import json

import numpy as np
import pytest

from cbna.cli import main, read_config
from cbna.datagen import SHIFT_PRESETS, read_dataset
from cbna.segnet import load_model


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tree(d):
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "src"), "--seed", "1", "--n", "6"]) == 0
    assert main(["gen-data", "--out", str(root / "tgt"), "--seed", "3", "--n", "6", "--shift", "preset-night",
                 "--sequence-length", "3"]) == 0
    assert main(["train", "--data", str(root / "src"), "--out", str(root / "m" / "model.ckpt"),
                 "--epochs", "1", "--batch-size", "3"]) == 0
    return root


def test_gen_data_count_and_manifest(workspace):
    ds = read_dataset(workspace / "src")
    assert len(ds) == 6
    manifest = json.loads((workspace / "src" / "run_manifest.json").read_text())
    assert manifest["command"] == "gen-data" and manifest["flags"]["seed"] == 1
    assert {"version", "duration_seconds", "seeds"} <= set(manifest)


def test_gen_data_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--seed", "5", "--n", "3"]) == 0
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    a.pop(next(k for k in a if k.name == "run_manifest.json"))
    b.pop(next(k for k in b if k.name == "run_manifest.json"))
    assert a == b


def test_preset_night_applied(workspace):
    assert read_dataset(workspace / "tgt").shift == SHIFT_PRESETS["preset-night"]


def test_gen_data_splits(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--n", "2", "--splits"]) == 0
    for split in ("source", "val", "test", "target"):
        assert len(read_dataset(tmp_path / split)) == 2
    assert read_dataset(tmp_path / "target").shift == SHIFT_PRESETS["preset-night"]


def test_train_outputs(workspace):
    model = load_model(workspace / "m" / "model.ckpt")
    assert model.num_classes == 4
    log = rows(workspace / "m" / "model_train_log.csv")
    assert [r["step"] for r in log] == ["0", "1"]
    assert (workspace / "m" / "run_manifest.json").exists()


def _eval(workspace, out, *flags):
    assert main(["eval", "--ckpt", str(workspace / "m" / "model.ckpt"), "--data", str(workspace / "tgt"),
                 "--out", str(out), *flags]) == 0
    return rows(out / "metrics.csv")[0], rows(out / "flops.csv")[0]


def test_eval_identities(workspace, tmp_path):
    none, none_f = _eval(workspace, tmp_path / "none", "--mode", "none")
    cbna0, _ = _eval(workspace, tmp_path / "cbna0", "--mode", "cbna", "--eta", "0")
    assert none["miou"] == cbna0["miou"]
    cli, _ = _eval(workspace, tmp_path / "cli", "--mode", "cli")
    czhang, _ = _eval(workspace, tmp_path / "czhang", "--mode", "czhang")
    cbna1, _ = _eval(workspace, tmp_path / "cbna1", "--mode", "cbna", "--eta", "1")
    assert czhang["mode"] == "cli" and czhang["miou"] == cli["miou"]
    assert float(cbna1["miou"]) == pytest.approx(float(cli["miou"]), abs=1e-6)
    _, ck = _eval(workspace, tmp_path / "ck", "--mode", "cklingner")
    assert ck["passes"] == "2" and int(ck["forward_flops"]) == 2 * int(none_f["forward_flops"])
    assert (tmp_path / "ck" / "run_manifest.json").exists()


def test_sweep_window_hist_flops(workspace, tmp_path):
    base = ["--ckpt", str(workspace / "m" / "model.ckpt"), "--data", str(workspace / "tgt")]
    assert main(["sweep", *base, "--out", str(tmp_path), "--grid", "0,0.5,1"]) == 0
    sweep = rows(tmp_path / "sweep.csv")
    assert [r["eta"] for r in sweep] == ["0", "0.5", "1"]
    assert main(["ablate-window", *base, "--out", str(tmp_path), "--windows", "1,3", "--eta", "0.5"]) == 0
    window = rows(tmp_path / "window.csv")
    assert window[0]["miou"] == sweep[1]["miou"]
    assert main(["hist", *base, "--out", str(tmp_path), "--eta", "0"]) == 0
    per = rows(tmp_path / "per_image.csv")
    assert len(per) == 6 and all(float(r["delta"]) == 0 for r in per)
    assert main(["flops", "--out", str(tmp_path)]) == 0
    assert [r["mode"] for r in rows(tmp_path / "flops.csv")] == ["none", "cli", "cklingner", "cbna"]
    assert b"\r" not in (tmp_path / "flops.csv").read_bytes()


def test_exit_codes(workspace, tmp_path, capsys):
    ck = str(workspace / "m" / "model.ckpt")
    assert main(["eval", "--ckpt", ck, "--data", str(workspace / "tgt"), "--out", str(tmp_path),
                 "--mode", "bogus"]) == 1
    assert main(["eval", "--ckpt", ck, "--data", str(workspace / "tgt"), "--out", str(tmp_path),
                 "--eta", "3"]) == 1
    assert main(["nonsense"]) == 1
    assert main(["eval", "--ckpt", str(tmp_path / "missing.ckpt"), "--data", str(workspace / "tgt"),
                 "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    assert main(["eval", "--ckpt", str(tmp_path / "bad.ckpt"), "--data", str(workspace / "tgt"),
                 "--out", str(tmp_path)]) == 2
    assert main(["eval", "--ckpt", ck, "--data", str(tmp_path / "nodata"), "--out", str(tmp_path)]) == 2


def test_config_defaults_and_flag_precedence(workspace, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# eval defaults\nmode = cli\neta=0.7\n")
    assert read_config(cfg) == {"mode": "cli", "eta": "0.7"}
    base = ["eval", "--config", str(cfg), "--ckpt", str(workspace / "m" / "model.ckpt"),
            "--data", str(workspace / "tgt")]
    assert main([*base, "--out", str(tmp_path / "a")]) == 0
    row = rows(tmp_path / "a" / "metrics.csv")[0]
    assert row["mode"] == "cli" and row["eta"] == "0.7"
    assert main([*base, "--out", str(tmp_path / "b"), "--mode", "cbna"]) == 0
    row = rows(tmp_path / "b" / "metrics.csv")[0]
    assert row["mode"] == "cbna" and row["eta"] == "0.7"
    (tmp_path / "broken.cfg").write_text("just words\n")
    assert main(["flops", "--config", str(tmp_path / "broken.cfg"), "--out", str(tmp_path)]) == 1


def test_jobs_do_not_change_results(workspace, tmp_path):
    a, _ = _eval(workspace, tmp_path / "j1", "--mode", "cbna", "--eta", "0.3")
    b, _ = _eval(workspace, tmp_path / "j3", "--mode", "cbna", "--eta", "0.3", "--jobs", "3")
    assert a == b


def test_dg_mix_training(workspace, tmp_path):
    assert main(["train", "--data", str(workspace / "src"), "--dg-mix", str(workspace / "tgt"),
                 "--out", str(tmp_path / "dg.ckpt"), "--epochs", "1", "--batch-size", "4"]) == 0
    assert not np.array_equal(load_model(tmp_path / "dg.ckpt").layers[0].weights,
                              load_model(workspace / "m" / "model.ckpt").layers[0].weights)
