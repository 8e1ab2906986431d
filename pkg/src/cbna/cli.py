"""Command line interface: ``cbna <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 acceptance failure.
A ``--config FILE`` of ``key=value`` lines supplies defaults; explicit flags win.
"""
from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from pathlib import Path


from . import __version__
from .acceptance import AcceptanceConfig, run_acceptance
from .adapt import DEFAULT_ETA, AdaptPolicy, FlopReport, Mode, count_flops
from .datagen import DomainShift, SceneSpec, generate, read_dataset, shift_from_name, write_dataset
from .datagen import CLASS_NAMES
from .errors import CbnaError
from .evaluation import (ETA_GRID, ablate_window, evaluate, per_image_miou_histogram, select_eta, sweep_eta,
                         write_csv)
from .segnet import build_toy_model, load_model, save_model
from .trainer import TrainConfig, train

EXIT_USAGE, EXIT_DATA, EXIT_ACCEPT = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_run_manifest(directory, args, started: float, extra=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    flags = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()
             if k not in ("func", "exit_code", "config")}
    manifest = {
        "command": args.command,
        "flags": flags,
        "seeds": {k: v for k, v in flags.items() if "seed" in k},
        "version": _version(),
        "duration_seconds": round(time.time() - started, 3),
    }
    manifest.update(extra or {})
    path = directory / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


def _mode(text):
    try:
        return Mode.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _shift(args) -> DomainShift:
    base = shift_from_name(args.shift)
    return DomainShift(
        base.brightness_offset if args.brightness is None else args.brightness,
        base.contrast_gain if args.contrast is None else args.contrast,
        base.channel_gain if args.channel_gain is None else args.channel_gain,
        base.noise_sigma if args.noise is None else args.noise,
    )


def _class_names(k):
    return list(CLASS_NAMES[:k]) if k <= len(CLASS_NAMES) else [f"class{i}" for i in range(k)]


# -- commands --------------------------------------------------------------------

def cmd_gen_data(args):
    out = Path(args.out)
    shift = _shift(args)
    if args.splits:
        splits = [("source", args.seed, DomainShift(), 1), ("val", args.seed + 1, DomainShift(), 1),
                  ("test", args.seed + 2, DomainShift(), 1),
                  ("target", args.seed + 3, shift if args.shift != "none" else shift_from_name("preset-night"),
                   args.sequence_length)]
    else:
        splits = [(None, args.seed, shift, args.sequence_length)]
    for name, seed, sh, seq in splits:
        d = out / name if name else out
        ds = generate(SceneSpec(seed=seed, sequence_length=seq), sh, args.n)
        write_dataset(ds, d)
        print(f"wrote {len(ds)} samples to {d}")
    return out


def cmd_train(args):
    data = read_dataset(args.data)
    mix = read_dataset(args.dg_mix) if args.dg_mix else None
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, lr_final=args.lr_final,
                      momentum_bn=args.bn_momentum, seed=args.seed, sgd_momentum=args.sgd_momentum,
                      flip=not args.no_flip)
    rows = []

    def on_step(epoch, step, loss, lr):
        rows.append((epoch, step, loss, lr))
        if args.verbose and step % 50 == 0:
            print(f"epoch {epoch} step {step} loss {loss:.4f}")

    model = train(build_toy_model(args.num_classes, args.model_seed), data, cfg, mix=mix, on_step=on_step)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    write_csv(args.log or out.with_name(out.stem + "_train_log.csv"), ("epoch", "step", "loss", "lr"), rows)
    print(f"saved checkpoint {out} (final loss {rows[-1][2]:.4f})")
    return out.parent


def cmd_eval(args):
    model, data = load_model(args.ckpt), read_dataset(args.data)
    policy = AdaptPolicy(args.mode, args.eta, args.window)
    res = evaluate(model, data, policy, jobs=args.jobs)
    out = Path(args.out)
    names = _class_names(model.num_classes)
    write_csv(out / "metrics.csv", ("mode", "eta", "window", "miou", *[f"iou_{n}" for n in names]),
              [(policy.mode.value, policy.eta_s, policy.window, res.miou, *res.ious)])
    rep = count_flops(model, policy, data.images.shape[1:3])
    write_csv(out / "flops.csv", FlopReport.CSV_HEADER, [rep.csv_row()])
    print(f"{policy.mode.value} eta={policy.eta_s:g} window={policy.window}: mIoU {res.miou:.4f}")
    print(f"passes={rep.passes} forward_flops={rep.forward_flops} stats_flops={rep.stats_flops} "
          f"mixing_flops={rep.mixing_flops}")
    return out


def cmd_sweep(args):
    model, data = load_model(args.ckpt), read_dataset(args.data)
    points = sweep_eta(model, data, args.grid, args.mode, jobs=args.jobs)
    names = _class_names(model.num_classes)
    write_csv(Path(args.out) / "sweep.csv", ("eta", "miou", *[f"iou_{n}" for n in names]),
              [(p.eta, p.miou, *p.ious) for p in points])
    for p in points:
        print(f"eta={p.eta:g} mIoU {p.miou:.4f}")
    print(f"selected eta: {select_eta([points], args.grid):g}")
    return Path(args.out)


def cmd_ablate_window(args):
    model, data = load_model(args.ckpt), read_dataset(args.data)
    curve = ablate_window(model, data, args.windows, args.mode, args.eta, jobs=args.jobs)
    write_csv(Path(args.out) / "window.csv", ("dn", "miou"), curve)
    for dn, m in curve:
        print(f"dN={dn} mIoU {m:.4f}")
    return Path(args.out)


def cmd_hist(args):
    model, data = load_model(args.ckpt), read_dataset(args.data)
    rep = per_image_miou_histogram(model, data, [AdaptPolicy(Mode.NO_ADAPT), AdaptPolicy(args.mode, args.eta)],
                                   args.abs_width, args.delta_width, jobs=args.jobs)
    out = Path(args.out)
    write_csv(out / "hist.csv", ("bin_low", *[f"count_{m}" for m in rep.modes]), rep.abs_rows)
    write_csv(out / "hist_delta.csv", ("bin_low", "count_delta"), rep.delta_rows)
    write_csv(out / "per_image.csv", ("image", *[f"miou_{m}" for m in rep.modes], "delta"),
              [(i, *[rep.per_image[m][i] for m in rep.modes], d) for i, d in enumerate(rep.deltas)])
    print(f"{rep.n_positive} images improve, {rep.n_negative} degrade")
    return out


def cmd_flops(args):
    model = load_model(args.ckpt) if args.ckpt else build_toy_model(args.num_classes, 0)
    rows = [count_flops(model, AdaptPolicy(m, args.eta, args.window), args.resolution).csv_row() for m in Mode]
    write_csv(Path(args.out) / "flops.csv", FlopReport.CSV_HEADER, rows)
    for r in rows:
        print(", ".join(str(v) for v in r))
    return Path(args.out)


def cmd_accept(args):
    cfg = AcceptanceConfig()
    results = run_acceptance(args.workdir, cfg)
    write_csv(Path(args.workdir) / "acceptance.csv", ("criterion", "name", "passed", "seconds", "detail"),
              [(r.number, r.name, r.passed, r.seconds, r.detail) for r in results])
    failed = [r for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    if failed:
        print(f"acceptance FAILED ({len(failed)} of {len(results)}): " + "; ".join(r.name for r in failed))
    else:
        print(f"acceptance passed: {len(results)} criteria in {total:.0f}s")
    args.exit_code = EXIT_ACCEPT if failed else 0
    return Path(args.workdir)


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cbna", description="Continual BN adaptation toolkit")
    p.add_argument("--config", help="file of key=value lines supplying flag defaults")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def model_data(sp, need_data=True):
        sp.add_argument("--ckpt", required=True)
        if need_data:
            sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--jobs", type=int, default=1)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--shift", default="none", choices=sorted(["none", "preset-night"]))
    g.add_argument("--brightness", type=float)
    g.add_argument("--contrast", type=float)
    g.add_argument("--channel-gain", type=_floats)
    g.add_argument("--noise", type=float)
    g.add_argument("--sequence-length", type=int, default=1)
    g.add_argument("--splits", action="store_true", help="write source/val/test and a shifted target split")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the toy model on a source dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="training log CSV (default: next to the checkpoint)")
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--lr-final", type=float)
    t.add_argument("--bn-momentum", type=float, default=0.1)
    t.add_argument("--sgd-momentum", type=float, default=0.9)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--model-seed", type=int, default=7)
    t.add_argument("--num-classes", type=int, default=4)
    t.add_argument("--no-flip", action="store_true")
    t.add_argument("--dg-mix", help="second source dataset; batches draw half from each")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint under one adaptation policy")
    model_data(e)
    e.add_argument("--mode", type=_mode, default=Mode.CBNA, help="none|cli|czhang|cklingner|cbna")
    e.add_argument("--eta", type=float, default=DEFAULT_ETA)
    e.add_argument("--window", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="mIoU over a grid of mixing weights")
    model_data(s)
    s.add_argument("--mode", type=_mode, default=Mode.CBNA)
    s.add_argument("--grid", type=_floats, default=ETA_GRID)
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("ablate-window", help="mIoU over frame-window lengths")
    model_data(a)
    a.add_argument("--mode", type=_mode, default=Mode.CBNA)
    a.add_argument("--eta", type=float, default=DEFAULT_ETA)
    a.add_argument("--windows", type=_ints, default=(1, 2, 3, 4, 5))
    a.set_defaults(func=cmd_ablate_window)

    h = sub.add_parser("hist", help="per-image mIoU distributions and deltas")
    model_data(h)
    h.add_argument("--mode", type=_mode, default=Mode.CBNA)
    h.add_argument("--eta", type=float, default=DEFAULT_ETA)
    h.add_argument("--abs-width", type=float, default=0.02)
    h.add_argument("--delta-width", type=float, default=0.01)
    h.set_defaults(func=cmd_hist)

    f = sub.add_parser("flops", help="per-image FLOP report for every mode")
    f.add_argument("--ckpt")
    f.add_argument("--out", required=True)
    f.add_argument("--eta", type=float, default=DEFAULT_ETA)
    f.add_argument("--window", type=int, default=1)
    f.add_argument("--resolution", type=_ints, default=(64, 64))
    f.add_argument("--num-classes", type=int, default=4)
    f.set_defaults(func=cmd_flops)

    c = sub.add_parser("accept", help="run the full acceptance suite")
    c.add_argument("--workdir", default="accept_run")
    c.set_defaults(func=cmd_accept)
    for sp in sub.choices.values():
        sp.add_argument("--config", help="file of key=value lines supplying flag defaults")
    return p


def read_config(path) -> dict:
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.lstrip("-").replace("-", "_")] = value
    return values


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = read_config(known.config)
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            dests = {a.dest: a for a in sp._actions}
            defaults = {}
            for k, v in values.items():
                if k not in dests:
                    continue
                if isinstance(dests[k], argparse._StoreTrueAction):
                    v = v.lower() in ("1", "true", "yes", "on")
                defaults[k] = v
            sp.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    started = time.time()
    try:
        _apply_config(parser, argv)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # usage errors, --help, --version
            return exc.code if isinstance(exc.code, int) else EXIT_USAGE
        args.exit_code = 0
        out = args.func(args)
    except UsageError as exc:
        print(f"cbna: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, argparse.ArgumentTypeError) as exc:
        if isinstance(exc, CbnaError):
            print(f"cbna: error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"cbna: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CbnaError, OSError) as exc:
        print(f"cbna: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    write_run_manifest(out, args, started)
    return args.exit_code


if __name__ == "__main__":
    sys.exit(main())
