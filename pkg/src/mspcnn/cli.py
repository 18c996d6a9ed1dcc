"""Batch command line: ``mspcnn <command> [--config FILE] [--profile desk|paper] ...``.

Progress goes to standard error; results go only to files under ``--out``.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .data import DataFormatError
from .pipeline import PRESETS, TABLE_ROWS, MissingStage, Run
from .solvers import SolverError
from .training import TrainingError

log = logging.getLogger("mspcnn")

COMMANDS = ("gen-data", "train-cae", "train-lstm", "tune-alpha", "predict", "evaluate", "noise-eval", "reproduce")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style run configuration")
    common.add_argument("--profile", choices=("desk", "paper"), default="desk")
    common.add_argument("--seed", type=int, help="overrides [run] seed")
    common.add_argument("--out", default="runs/default", help="run directory (default: runs/default)")
    common.add_argument("--threads", type=int, help="cap on worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mspcnn", description="Multi-fidelity physics-constrained latent forecasting")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="simulate paired high/low trajectories")
    sub.add_parser("train-cae", parents=[common], help="train the multi-fidelity autoencoder")
    models = sorted(PRESETS)
    s = sub.add_parser("train-lstm", parents=[common], help="train one LSTM variant")
    s.add_argument("--model", default="Basic", choices=models)
    s.add_argument("--tuned", action="store_true", help="use coefficients found by tune-alpha")
    s = sub.add_parser("tune-alpha", parents=[common], help="random search over constraint coefficients")
    s.add_argument("--model", default="LF-MulCons", choices=models)
    s = sub.add_parser("predict", parents=[common], help="write recurrent predictions for the evaluation split")
    s.add_argument("--model", default="Basic", choices=models)
    s.add_argument("--horizon", type=int)
    s = sub.add_parser("evaluate", parents=[common], help="metrics and summary table for trained LSTMs")
    s.add_argument("--models", help="comma-separated model names (default: every trained model)")
    s = sub.add_parser("noise-eval", parents=[common], help="noisy-start robustness comparison")
    s.add_argument("--models", default="Basic,LF-MulCons")
    s = sub.add_parser("reproduce", parents=[common], help="full experiment matrix for one case")
    s.add_argument("--case", required=True, choices=sorted(TABLE_ROWS))
    return p


def _split(text: str | None) -> list[str] | None:
    return [t.strip() for t in text.split(",") if t.strip()] if text else None


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING if args.command != "reproduce" else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    overrides: dict[str, dict] = {"run": {}}
    if args.seed is not None:
        overrides["run"]["seed"] = args.seed
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be at least 1", file=sys.stderr)
            return 2
        overrides["run"]["threads"] = args.threads
    if args.command == "reproduce":
        overrides["run"]["system"] = args.case
    try:
        cfg = load_config(args.config, args.profile, overrides)
        pipe = Run(cfg, args.out)
        pipe.echo_config()
        cmd = args.command
        if cmd == "gen-data":
            pipe.gen_data()
        elif cmd == "train-cae":
            pipe.train_cae()
        elif cmd == "train-lstm":
            pipe.train_lstm(args.model, tuned=args.tuned)
        elif cmd == "tune-alpha":
            pipe.tune(args.model)
        elif cmd == "predict":
            pipe.predict(args.model, args.horizon)
        elif cmd == "evaluate":
            pipe.evaluate(_split(args.models))
        elif cmd == "noise-eval":
            pipe.noise_eval(_split(args.models))
        elif cmd == "reproduce":
            pipe.reproduce(args.case)
    except (ConfigError, MissingStage, DataFormatError, SolverError, TrainingError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
