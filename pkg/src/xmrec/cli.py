"""Command-line entry point.

Stage commands: synth, labels, quantize, diagnose, build-tasks, train,
infer, eval, pipeline. Configuration comes from an INI file plus repeatable
--set section.key=value overrides; environment variables are not consulted.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

COMMANDS = ("synth", "labels", "quantize", "diagnose", "build-tasks",
            "train", "infer", "eval", "pipeline")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xmrec",
        description="Cross-modal semantic-ID generative recommendation "
                    "pipeline")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("-c", "--config", default=None,
                        help="INI config file (defaults are built in)")
    parser.add_argument("--set", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", dest="overrides",
                        help="override a config value (repeatable)")
    parser.add_argument("--out", default=None,
                        help="shorthand for --set run.out_dir=...")
    parser.add_argument("--seed", type=int, default=None,
                        help="shorthand for --set run.seed=...")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS/OpenMP thread cap (default from config)")
    return parser


def _pin_threads(n: int):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if args.out is not None:
        overrides.append(f"run.out_dir={args.out}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"run.threads={args.threads}")
    _pin_threads(args.threads if args.threads is not None else 1)

    # heavy imports after the thread caps are pinned
    from .config import load_config
    from .errors import ConfigError, DataError, NumericError
    from .runner import STAGES, run_pipeline

    try:
        cfg = load_config(args.config, overrides)
        _pin_threads(cfg.threads)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "pipeline":
            result = run_pipeline(cfg)
        else:
            result = STAGES[args.command](cfg)
        print(json.dumps({"command": args.command, "out_dir": str(cfg.out_dir),
                          "result": result}, indent=2, sort_keys=True,
                         default=str))
        return 0
    except ConfigError as err:
        for violation in err.violations:
            print(f"config error: {violation}", file=sys.stderr)
        return 2
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        if err.breakdown:
            print(json.dumps(err.breakdown, indent=2, default=str),
                  file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
