"""``skelgrow generate|train|animate|eval``.

Exit status: 0 ok, 2 invalid input, 3 numeric failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import cli_io
from .trainer import TrainingError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skelgrow", description="Adaptive skeleton growth on point trajectories.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic scene from a spec JSON")
    g.add_argument("--config", required=True, help="scene spec JSON")
    g.add_argument("--out", required=True, help="scene JSON path (a .bin sidecar is written next to it)")
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="fit, localize, grow and refine")
    t.add_argument("--config", required=True, help="run config JSON")
    t.add_argument("--out", help="output directory (overrides 'out' in the config)")
    t.add_argument("--seed", type=int, help="overrides the training and scene seed")
    t.add_argument("--no-frames", action="store_true", help="skip per-frame PLY export")

    a = sub.add_parser("animate", help="replay a trained model, optionally with explicit rotations")
    a.add_argument("--model", required=True, help="directory written by 'train'")
    a.add_argument("--config", "--overrides", dest="overrides", help="overrides JSON (per-entry per-frame axis-angles)")
    a.add_argument("--out", required=True, help="directory for PLY frames")
    a.add_argument("--freeze-base-frame", type=int, help="hold the base pose at this frame")
    a.add_argument("--seed", type=int, help="accepted for symmetry; replay is deterministic")

    e = sub.add_parser("eval", help="score a trained model against its scene")
    e.add_argument("--model", required=True)
    e.add_argument("--config", "--scene", dest="scene", help="scene JSON (default: the model's copy)")
    e.add_argument("--out", help="directory for eval.json")
    e.add_argument("--seed", type=int, help="accepted for symmetry; evaluation is deterministic")
    return p


def run(args) -> None:
    if args.command == "generate":
        cli_io.cmd_generate(args.config, args.out, args.seed)
    elif args.command == "train":
        cli_io.cmd_train(args.config, args.out, args.seed, export_frames=not args.no_frames)
    elif args.command == "animate":
        cli_io.cmd_animate(args.model, args.overrides, args.out, args.freeze_base_frame)
    elif args.command == "eval":
        cli_io.cmd_eval(args.model, args.scene, args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run(args)
    except TrainingError as e:
        print(f"skelgrow: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"skelgrow: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except cli_io.VALIDATION_ERRORS as e:
        print(f"skelgrow: invalid input: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
