"""``deepred`` command line: run, compare, simulate, selftest."""

import argparse
import sys

from . import experiments
from .config import PRESETS, ConfigError, parse_config


def _load_config(args):
    text = ""
    if args.config:
        with open(args.config) as fh:
            text = fh.read()
    overrides = {"task": {}, "solver": {}}
    if args.seed is not None:
        overrides["task"]["seed"] = args.seed
        overrides["solver"]["seed"] = args.seed
    if args.iters is not None:
        overrides["solver"]["iterations"] = args.iters
    if args.output is not None:
        overrides["task"]["output"] = args.output
    if getattr(args, "input", None):
        overrides["task"]["input"] = args.input
    if args.sequential:
        overrides["solver"]["parallel"] = False
    return parse_config(text, preset=args.preset, overrides=overrides)


def build_parser():
    parser = argparse.ArgumentParser(prog="deepred", description="Image restoration with a generator prior and a denoiser regularizer.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="configuration file")
        p.add_argument("--preset", choices=sorted(PRESETS), help="load a named parameter preset first")
        p.add_argument("--seed", type=int, help="rng seed for noise synthesis and network init")
        p.add_argument("--iters", type=int, help="total network iterations")
        p.add_argument("--output", help="output directory")
        p.add_argument("--input", help="input image or directory of .png images")
        p.add_argument("--sequential", action="store_true", help="run the denoiser on the main thread")

    p = sub.add_parser("run", help="restore the configured images")
    common(p)
    p.add_argument("--timing", action="store_true", help="record wall-clock seconds in the trace")
    p = sub.add_parser("compare", help="PSNR table of DIP, RED and DeepRED")
    common(p)
    p.add_argument("--methods", default="dip,red,deepred", help="comma separated subset of dip,red,deepred")
    p = sub.add_parser("simulate", help="write the degraded inputs only")
    common(p)
    p = sub.add_parser("selftest", help="run the built-in property checks")
    p.add_argument("--quick", action="store_true", help="fewer random trials")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        from .selftest import run_selftest
        return run_selftest(quick=args.quick)
    try:
        cfg = _load_config(args)
    except (ConfigError, OSError) as exc:
        print(f"deepred: configuration error: {exc}", file=sys.stderr)
        return 2
    if not cfg.task.input:
        print("deepred: no input given (set [task] input or --input)", file=sys.stderr)
        return 2
    try:
        if args.command == "run":
            return experiments.run_experiment(cfg, timing=args.timing)
        if args.command == "compare":
            methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
            table = experiments.compare(cfg, methods)
            print(table.format(), end="")
            return 0
        experiments.simulate(cfg)
        return 0
    except (OSError, ValueError) as exc:
        print(f"deepred: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
