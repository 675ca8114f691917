"""Command-line front door.

    gcmkit train   --config cfg.json --out outdir [--seed N]
    gcmkit eval    --config cfg.json --out outdir [--seed N] [--gcm on|off]
                   [--placement front|block:<name>|all]
    gcmkit sweep   --config cfg.json --out outdir [--seed N] [--kind eps|w|position]
    gcmkit signmap --config cfg.json --out outdir [--seed N]

Exit codes: 0 success, 2 config error, 3 data-format error, 4 numeric failure.
"""

import argparse
import logging
import os
import sys

from .errors import CheckpointError, ConfigError, DataFormatError, NumericError
from .experiments import (ExperimentConfig, ablation_sweep, ensure_model,
                          load_experiment_data, render_experiment_signmaps,
                          run_experiment, summary_text)
from .gcm import GcmPlacement


def _add_common(p):
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")


def build_parser():
    parser = argparse.ArgumentParser(prog="gcmkit",
                                     description="gradient-concealment robustness toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("train", help="train the model and write a checkpoint"))

    p_eval = sub.add_parser("eval", help="evaluate the attack grid and write reports")
    _add_common(p_eval)
    p_eval.add_argument("--gcm", choices=["on", "off"], default=None,
                        help="restrict to the concealed (on) or vanilla (off) variant")
    p_eval.add_argument("--placement", default=None,
                        help="front | block:<name> | all (overrides the config)")

    p_sweep = sub.add_parser("sweep", help="run an ablation sweep")
    _add_common(p_sweep)
    p_sweep.add_argument("--kind", choices=["eps", "w", "position"], default=None)

    _add_common(sub.add_parser("signmap", help="render gradient sign maps"))
    return parser


def _cmd_train(cfg, out_dir):
    train_ds, _ = load_experiment_data(cfg)
    ensure_model(cfg, train_ds, out_dir)
    return 0


def _cmd_eval(cfg, out_dir, args):
    if args.placement:
        cfg.placement = GcmPlacement.parse(args.placement)
    variants = None
    if args.gcm == "on":
        variants = ("gcm",)
    elif args.gcm == "off":
        variants = ("vanilla",)
    summary = run_experiment(cfg, out_dir, variants=variants)
    sys.stdout.write(summary_text(summary))
    return 0


def _cmd_sweep(cfg, out_dir, args):
    table = ablation_sweep(cfg, out_dir, kind=args.kind)
    with open(os.path.join(out_dir, f"sweep_{table['kind']}.txt"), "r", encoding="utf-8") as f:
        sys.stdout.write(f.read())
    return 0


def _cmd_signmap(cfg, out_dir):
    written = render_experiment_signmaps(cfg, out_dir)
    for path in written:
        print(path)
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    stage = "config"
    try:
        cfg = ExperimentConfig.from_file(args.config, seed_override=args.seed)
        os.makedirs(args.out, exist_ok=True)
        stage = args.command
        if args.command == "train":
            return _cmd_train(cfg, args.out)
        if args.command == "eval":
            return _cmd_eval(cfg, args.out, args)
        if args.command == "sweep":
            return _cmd_sweep(cfg, args.out, args)
        return _cmd_signmap(cfg, args.out)
    except ConfigError as e:
        print(f"error in stage {stage}: {e}", file=sys.stderr)
        return 2
    except (DataFormatError, CheckpointError) as e:
        print(f"error in stage {stage}: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"error in stage {stage}: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
