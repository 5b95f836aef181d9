"""``crpsd train|predict|eval|regions --config FILE [--seed N] [--out DIR]``"""
from __future__ import annotations

import argparse
import logging
import sys

from ..imaging import ImageError
from ..metrics import EmptyGroundTruthError
from ..nn import ModelFormatError
from . import commands
from .config import ConfigError, RunConfig
from .dataset import ManifestError

COMMANDS = {
    "train": commands.cmd_train,
    "predict": commands.cmd_predict,
    "eval": commands.cmd_eval,
    "regions": commands.cmd_regions,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crpsd", description="Region/pixel saliency detection batch tool.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="key = value run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument("--out", default=None, help="output directory (default: out_dir from the config)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        out_dir = args.out or cfg.out_dir
        COMMANDS[args.command](cfg, out_dir)
    except (
        ConfigError,
        ManifestError,
        ImageError,
        ModelFormatError,
        EmptyGroundTruthError,
        commands.CommandError,
        OSError,
        ValueError,
    ) as exc:
        print(f"crpsd {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
