"""``lexa`` command line: train, eval, export.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    pass


def _limit_threads() -> None:
    # must run before numpy loads its BLAS
    n = os.environ.get("LEXA_THREADS")
    if n:
        for var in _THREAD_VARS:
            os.environ[var] = n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lexa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run unsupervised training (resumes if interrupted)")
    train.add_argument("--config", required=True, type=Path)
    train.add_argument("--seed", required=True, type=int)
    train.add_argument("--outdir", required=True, type=Path)

    ev = sub.add_parser("eval", help="zero-shot evaluation of a checkpoint on a goal file")
    ev.add_argument("--ckpt", required=True, type=Path)
    ev.add_argument("--goals", required=True, type=Path)
    ev.add_argument("--episodes-per-goal", required=True, type=int)
    ev.add_argument("--seed", type=int, default=12345, help="reset seed for evaluation episodes")
    ev.add_argument("--csv", type=Path, default=None, help="output CSV (default: beside the checkpoint)")

    ex = sub.add_parser("export", help="write CSV/PNG artifacts from a run directory")
    ex.add_argument("--run", required=True, type=Path)
    ex.add_argument("--what", required=True)
    return parser


def cmd_train(args) -> int:
    from .orchestrator import ConfigError, Run, TrainConfig

    if not args.config.is_file():
        raise UsageError(f"config file not found: {args.config}")
    try:
        config = TrainConfig.load(args.config)
        config.seed = args.seed
        config.validate()
    except ConfigError as err:
        raise UsageError(f"invalid config: {err}") from None
    out = Run(config, args.outdir).run()
    print(f"run complete: {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .envs import load_goals
    from .evaluation import format_table, write_success_csv
    from .ndgrad import CheckpointError
    from .orchestrator import ConfigError, Agent

    if args.episodes_per_goal < 1:
        raise UsageError("--episodes-per-goal must be >= 1")
    for path in (args.ckpt, args.goals):
        if not path.is_file():
            raise UsageError(f"file not found: {path}")
    try:
        goals = load_goals(args.goals)
    except (ValueError, KeyError) as err:
        raise UsageError(f"invalid goal file: {err}") from None
    try:
        agent, _ = Agent.load(args.ckpt)
    except (CheckpointError, ConfigError, KeyError) as err:
        raise UsageError(f"invalid checkpoint: {err}") from None
    envs = {g.env for g in goals}
    if envs != {agent.config.env}:
        raise UsageError(f"goal file env {sorted(envs)} does not match checkpoint env {agent.config.env!r}")
    result = agent.evaluate(goals, args.episodes_per_goal, seed=args.seed)
    print(format_table(result))
    csv_path = args.csv or args.ckpt.with_suffix(".eval.csv")
    write_success_csv(csv_path, result, args.episodes_per_goal)
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_export(args) -> int:
    from .evaluation import EXPORTS, export

    if args.what not in EXPORTS:
        raise UsageError(f"--what must be one of {', '.join(EXPORTS)}; got {args.what!r}")
    if not (args.run / "metrics.jsonl").is_file():
        raise UsageError(f"no metrics.jsonl in {args.run}")
    for path in export(args.run, args.what):
        print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "export": cmd_export}


def main(argv=None) -> int:
    _limit_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"lexa {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("interrupted; rerun the same command to resume", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as err:  # noqa: BLE001
        logging.getLogger("lexa").debug("failure", exc_info=True)
        print(f"lexa {args.command}: runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
