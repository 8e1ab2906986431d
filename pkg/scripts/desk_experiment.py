"""End-to-end desk experiment: data, source training, then every report.

    python3 scripts/desk_experiment.py --out runs/desk

Produces, under --out:
    data/{source,val,test,target}/    datasets (target: night shift, 8-frame clips)
    model/source.ckpt                 trained toy model and its training log
    eval_<mode>/                      metrics.csv + flops.csv per strategy
    sweep/sweep.csv                   mIoU over the eta grid
    window/window.csv                 window ablation at the selected eta
    hist/                             per-image mIoU histograms and deltas
    flops/flops.csv                   FLOP report for all strategies
"""
import argparse
import csv
import sys
from pathlib import Path

from cbna.cli import main as cbna
from cbna.evaluation import ETA_GRID, select_eta


def run(*argv):
    code = cbna([str(a) for a in argv])
    if code != 0:
        sys.exit(f"step failed ({code}): {' '.join(map(str, argv))}")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--n", type=int, default=200, help="images per split (source uses 2x)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    out = Path(args.out)
    data = out / "data"

    run("gen-data", "--out", data / "source", "--seed", 1, "--n", 2 * args.n)
    run("gen-data", "--out", data / "val", "--seed", 2, "--n", args.n)
    run("gen-data", "--out", data / "target", "--seed", 3, "--n", args.n,
        "--shift", "preset-night", "--sequence-length", 8)
    ckpt = out / "model" / "source.ckpt"
    run("train", "--data", data / "source", "--out", ckpt, "--epochs", args.epochs, "--lr", 0.01, "--verbose")

    common = ["--ckpt", ckpt, "--jobs", args.jobs]
    run("eval", *common, "--data", data / "val", "--out", out / "eval_val_none", "--mode", "none")
    for mode in ("none", "cli", "cklingner", "cbna"):
        run("eval", *common, "--data", data / "target", "--out", out / f"eval_{mode}", "--mode", mode)

    run("sweep", *common, "--data", data / "target", "--out", out / "sweep")
    with open(out / "sweep" / "sweep.csv", newline="") as fh:
        curve = [(float(r["eta"]), float(r["miou"])) for r in csv.DictReader(fh)]
    eta = select_eta([curve], ETA_GRID)
    print(f"selected eta {eta:g}")

    run("ablate-window", *common, "--data", data / "target", "--out", out / "window", "--eta", eta)
    run("hist", *common, "--data", data / "target", "--out", out / "hist", "--eta", eta)
    run("flops", "--ckpt", ckpt, "--out", out / "flops", "--eta", eta)


if __name__ == "__main__":
    main()
