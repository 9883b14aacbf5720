import argparse

from maskfill.commands import GEN_DATA_SECTIONS, cmd_gen_data

from . import add_common_arguments, epilog, run_command


def main():
    parser = argparse.ArgumentParser(description="Generate the procedural shapes dataset", epilog=epilog)
    add_common_arguments(parser)
    parser.add_argument("-s", "--num_samples", type=int, help="Number of training samples")
    parser.add_argument("--heldout_samples", type=int, help="Number of held-out samples")
    parser.add_argument("-r", "--resolution", type=int, help="Image size in pixels")
    parser.add_argument("-n", "--n_workers", type=int, help="Number of writer threads")

    # parse arguments
    args = parser.parse_args()

    flags = {
        "dataset": {"seed": args.seed, "num_samples": args.num_samples, "resolution": args.resolution},
        "job": {"out": args.out, "heldout_samples": args.heldout_samples, "n_workers": args.n_workers},
    }
    return run_command(
        "maskfill_gen_data", args, GEN_DATA_SECTIONS, flags, cmd_gen_data, lambda c: c["dataset"].seed
    )
