import argparse

from maskfill.commands import MASK_LADDER_SECTIONS, cmd_mask_ladder

from . import add_common_arguments, epilog, run_command


def main():
    parser = argparse.ArgumentParser(description="Write every precision level of a mask", epilog=epilog)
    add_common_arguments(parser)
    parser.add_argument("mask", help="Input mask image file")
    parser.add_argument("-S", "--levels", type=int, help="Number of coarse levels S")

    # parse arguments
    args = parser.parse_args()

    flags = {"ladder": {"S": args.levels}, "job": {"mask": args.mask, "out": args.out}}
    # the ladder is deterministic, --seed only seeds the global generators
    return run_command(
        "maskfill_mask_ladder", args, MASK_LADDER_SECTIONS, flags, cmd_mask_ladder, lambda c: args.seed
    )
