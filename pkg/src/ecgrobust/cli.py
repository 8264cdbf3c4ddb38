"""Command line entry point: ``ecgrobust <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import experiment as ex
from . import signal_data as sd


def _parent():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out-dir", default="runs", help="output directory (default: runs)")
    return p


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ecgrobust", description="Robust 1-D signal classifier training and evaluation.",
        epilog=ex.CONFIG_KEYS, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _parent()
    fmt = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("synth", help="write a synthetic beat or recording corpus",
                       parents=[common], formatter_class=fmt)
    p.add_argument("--out", dest="out", help="output directory (alias of --out-dir)")
    p.add_argument("--kind", choices=("beats", "recordings"), default="beats")
    p.add_argument("--n-per-class", type=int, default=400)
    p.add_argument("--n-test-per-class", type=int, default=100)

    p = sub.add_parser("prepare-data", help="split/balance beats or a recording corpus",
                       parents=[common], formatter_class=fmt)
    p.add_argument("--beats-train")
    p.add_argument("--beats-test")
    p.add_argument("--corpus")
    p.add_argument("--manifest")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--no-balance", action="store_true")

    p = sub.add_parser("train", help="train one model", parents=[common],
                       epilog=ex.CONFIG_KEYS, formatter_class=fmt)
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="also checkpoint every N epochs (default: final epoch only)")

    p = sub.add_parser("sweep", help="train over a parameter grid and pick the best",
                       parents=[common], epilog=ex.CONFIG_KEYS, formatter_class=fmt)
    p.add_argument("--grid", required=True, help="comma-separated parameter values")

    p = sub.add_parser("evaluate", help="attack a checkpoint over the noise grid",
                       parents=[common], epilog=ex.CONFIG_KEYS, formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = sub.add_parser("report", help="combine curve files into one table and plot",
                       parents=[common], formatter_class=fmt)
    p.add_argument("curves", nargs="+", help="*_curve.json files from evaluate")
    p.add_argument("--eps-max", type=float, required=True)
    p.add_argument("--stem", default="report")
    return parser


def _config(args):
    if not args.config:
        raise ex.ConfigError("--config is required for this command")
    cfg = ex.load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _cmd_synth(args):
    out = Path(args.out or args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed or 0
    if args.kind == "beats":
        sd.write_beat_dataset(sd.synth_beats(args.n_per_class, seed=seed), out / "train.csv")
        sd.write_beat_dataset(sd.synth_beats(args.n_test_per_class, seed=seed + 10_000), out / "test.csv")
    else:
        recs = sd.synth_recordings(args.n_per_class, seed=seed)
        sd.write_recording_corpus(recs, out / "corpus", out / "manifest.csv")
    print(f"wrote synthetic {args.kind} to {out}")


def _cmd_prepare(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed or 0
    if args.beats_train:
        train = sd.load_beat_dataset(args.beats_train, "train")
        train, val = sd.split_train_val(train, args.val_fraction, seed)
        test = sd.load_beat_dataset(args.beats_test, "test") if args.beats_test else []
        if not args.no_balance:
            train = sd.balance_by_upsampling(train, seed)
            test = sd.balance_by_upsampling(test, seed + 1) if test else test
        sd.write_beat_dataset(train, out / "train.csv")
        sd.write_beat_dataset(val, out / "val.csv")
        if test:
            sd.write_beat_dataset(test, out / "test.csv")
        print(f"train {len(train)}  val {len(val)}  test {len(test)}")
    elif args.corpus and args.manifest:
        recs = sd.load_recording_corpus(args.corpus, args.manifest)
        train, val, test, split = sd.prepare_cpsc_corpus(recs, seed, balance=not args.no_balance)
        split.save(out / "split.json")
        for name, part in (("train", train), ("val", val), ("test", test)):
            part = [sd.scale_leads_maxabs(r) for r in part]
            sd.write_recording_corpus(part, out / name, out / f"{name}_manifest.csv")
        print(f"train {len(split.train_ids)}  val {len(split.val_ids)}  test {len(split.test_ids)}")
    else:
        raise ex.ConfigError("prepare-data needs --beats-train or --corpus with --manifest")


def _cmd_train(args):
    rec = ex.train(_config(args), args.out_dir, checkpoint_every=args.checkpoint_every)
    print(json.dumps({"name": rec.name, "checkpoint": rec.checkpoint,
                      "val_acc_robust": rec.val_summary["acc_robust"]}))


def _cmd_sweep(args):
    grid = [float(v) for v in args.grid.split(",") if v.strip()]
    best, records = ex.sweep(_config(args), grid, args.out_dir)
    for r in records:
        print(f"{r.name}\t{r.val_summary['acc_robust']:.4f}")
    print(f"best parameter: {best:g}")


def _cmd_evaluate(args):
    for curve, summary in ex.evaluate(args.checkpoint, _config(args), args.out_dir, args.split):
        print(f"{curve.model_name}\t{curve.attack['name']}\tACC_robust {summary.acc_robust:.4f}"
              f"\tF1_robust {summary.f1_robust:.4f}")


def _cmd_report(args):
    for path in ex.report(args.curves, args.eps_max, Path(args.out_dir) / "reports", args.stem):
        print(path)


COMMANDS = {"synth": _cmd_synth, "prepare-data": _cmd_prepare, "train": _cmd_train,
            "sweep": _cmd_sweep, "evaluate": _cmd_evaluate, "report": _cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ex.ConfigError, sd.DataFormatError, sd.DataValidationError, FileNotFoundError,
            KeyError, yaml.YAMLError, RuntimeError, ValueError) as exc:
        print(f"ecgrobust {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
