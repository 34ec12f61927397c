"""``lirl <command> --config <path>`` entry point.

Exit status: 0 on success, 2 for configuration problems, 3 when training
or a projection fails numerically.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from .config import Config
from .constraints import ConfigError, ProblemScale
from .neural import TrainingDivergence
from .projection import ProjectionError
from .runner import COMMANDS, Pipeline

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lirl", description="Logic-informed RL scheduling experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON config merged over the shipped reference")
    p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--alpha", type=float, help="makespan weight in the reward")
    p.add_argument("--scale", help="problem scale label such as J10R3")
    p.add_argument("--out", help="output directory (default: output_dir from the config)")
    p.add_argument("--episodes", type=int, help="override the training episode limit")
    p.add_argument("--workers", type=int, help="parallel worker processes (0 = one per CPU)")
    p.add_argument("--variant", choices=("lirl", "mask"), default="lirl",
                   help="agent variant for train/evaluate")
    return p


def _overrides(args) -> dict:
    out = {}
    if args.seeds is not None:
        try:
            out["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds: expected comma-separated integers, got {args.seeds!r}") from None
        if not out["seeds"]:
            raise ConfigError("--seeds: at least one seed is required")
    if args.alpha is not None:
        out["alpha"] = args.alpha
    if args.scale is not None:
        out["scale"] = ProblemScale.parse(args.scale).label
    if args.episodes is not None:
        out["episodes"] = args.episodes
    if args.workers is not None:
        out["workers"] = args.workers
    return out


def load_config(args) -> Config:
    try:
        cfg = Config.load(args.config)
    except FileNotFoundError:
        raise ConfigError(f"{args.config}: no such config file") from None
    over = _overrides(args)
    if not over:
        return cfg
    try:
        return cfg.with_overrides(**over)
    except ConfigError as exc:
        raise ConfigError(f"command-line override: {exc}") from None


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        pipe = Pipeline(cfg, args.out or cfg.data.get("output_dir", "runs"))
        if args.command in ("train", "evaluate"):
            getattr(pipe, args.command)(args.variant)
        else:
            pipe.run(args.command)
    except ConfigError as exc:
        print(f"lirl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergence, ProjectionError, FloatingPointError) as exc:
        print(f"lirl: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"lirl {args.command}: results in {pipe.out}")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
