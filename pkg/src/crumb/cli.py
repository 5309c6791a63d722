"""Command-line entry point: ``crumb pretrain|stream|report|ablate``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import config as cfgmod
from . import experiment
from .stream_data import DataError
from .tensor_nn import NonFiniteError, ShapeError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "CRUMB_OUTPUT_ROOT"

log = logging.getLogger("crumb")


def _add_config_flags(p):
    p.add_argument("config", nargs="?", help="sectioned key = value config file")
    group = p.add_argument_group("config overrides (flag wins over file)")
    for key in cfgmod.SCHEMA:
        group.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, metavar="VALUE")


def _overrides(args):
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}


def _resolve(args):
    if args.config:
        return cfgmod.load(args.config, _overrides(args))
    return cfgmod.resolve({}, _overrides(args))


def _output_dir(values, explicit=None):
    path = Path(explicit or values["output_dir"])
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def build_parser():
    parser = argparse.ArgumentParser(prog="crumb", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain backbone and codebook on disjoint classes")
    _add_config_flags(p)

    p = sub.add_parser("stream", help="run the task schedule from a pretrained checkpoint")
    _add_config_flags(p)
    p.add_argument("--pretrained", required=True, help="pretrain output directory or checkpoint")
    p.add_argument("--resume", action="store_true", help="continue from the last task checkpoint")
    p.add_argument("--stop-after-task", type=int, default=None, help=argparse.SUPPRESS)

    p = sub.add_parser("report", help="aggregate run directories")
    p.add_argument("runs", nargs="+", help="stream output directories")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--filter-runs", action="store_true", help="drop runs by first-task accuracy cascade")

    p = sub.add_parser("ablate", help="expand the [ablate] grid into child runs and report")
    _add_config_flags(p)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, experiment.RunError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def _dispatch(args):
    if args.command == "report":
        summary = experiment.run_report(args.runs, _output_dir({"output_dir": args.out}), args.filter_runs)
        for name, t, df, p in summary["tests"]:
            print(f"{name}: t={t:.4f} df={df} p={p:.4g}")
        return EXIT_OK
    values, grid = _resolve(args)
    out = _output_dir(values)
    if args.command == "ablate":
        if not grid:
            raise cfgmod.ConfigError("ablate needs an [ablate] section")
        summary = experiment.run_ablation(values, grid, out)
        for name, t, df, p in summary["tests"]:
            print(f"{name}: t={t:.4f} df={df} p={p:.4g}")
        return EXIT_OK
    if grid:
        raise cfgmod.ConfigError("[ablate] section is only valid for the ablate command")
    if args.command == "pretrain":
        m = experiment.run_pretrain(values, out)
        print(f"pretrained: train top-1 {m['train_top1']:.4f}, test top-1 {m['test_top1']:.4f} -> {out}")
        return EXIT_OK
    m = experiment.run_stream(values, args.pretrained, out, resume=args.resume,
                              stop_after_task=args.stop_after_task)
    if m is None:
        print(f"stopped early; resume with --resume -> {out}")
    else:
        print(f"final all-seen top-1 {m['final_all_seen']:.4f} ({m['mode']}) -> {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
