import argparse

from maskfill.commands import EVAL_SECTIONS, cmd_eval

from . import add_common_arguments, epilog, run_command


def main():
    parser = argparse.ArgumentParser(description="Evaluate a directory of inpainting samples", epilog=epilog)
    add_common_arguments(parser)
    parser.add_argument("--samples", help="Directory written by maskfill_sample --data")
    parser.add_argument("--heldout_data", help="Held-out real data for training the shape probe")
    parser.add_argument("--probe", help="Probe checkpoint, loaded if it exists, written otherwise")
    parser.add_argument("-n", "--n_workers", type=int, help="Number of scoring threads")

    # parse arguments
    args = parser.parse_args()

    flags = {
        "eval": {"n_workers": args.n_workers, "probe": {"seed": args.seed}},
        "job": {"out": args.out, "samples": args.samples, "heldout_data": args.heldout_data, "probe": args.probe},
    }
    return run_command("maskfill_eval", args, EVAL_SECTIONS, flags, cmd_eval, lambda c: c["eval"].probe.seed)
