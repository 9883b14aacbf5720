import argparse
import logging
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional

from maskfill.config import load_config
from maskfill.errors import MaskfillError
from maskfill.utilities import seed_everything, setup_logging

# set a default epilog signature
epilog = "maskfill: shape-guided diffusion inpainting on procedural shapes"


def add_common_arguments(parser: argparse.ArgumentParser) -> None:
    """--config, --seed, --out and --set, shared by every command"""
    parser.add_argument("--config", help="YAML config file (sections as in config.yaml of a previous run)")
    parser.add_argument("--seed", type=int, help="Seed of every random stream the command uses")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override a config value, may be repeated (flags still win)",
    )


def run_command(
    name: str,
    args: argparse.Namespace,
    sections: Mapping[str, Any],
    flags: Dict[str, Any],
    command: Callable[[Dict[str, Any]], Any],
    seed_of: Callable[[Dict[str, Any]], Optional[int]],
) -> int:
    """Resolve the configuration, set up logging in the output directory and run a command

    Returns
    -------
    int
        exit code, 0 on success and 1 on a reported error
    """
    # setup logging
    setup_logging()

    # log arguments
    print(f"{name}: {args}")

    try:
        configs = load_config(sections, args.config, args.overrides, flags)
        out = Path(configs["job"].out)
        setup_logging(out / f"{name}.log")
        seed = seed_of(configs)
        if seed is not None:
            seed_everything(seed)
        command(configs)
    except (MaskfillError, FileNotFoundError, ValueError) as e:
        logging.error(str(e))
        return 1
    print("Done.")
    return 0
