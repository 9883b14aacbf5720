import argparse

from maskfill.commands import TRAIN_SECTIONS, cmd_train

from . import add_common_arguments, epilog, run_command


def main():
    parser = argparse.ArgumentParser(description="Train the shape-guided inpainting denoiser", epilog=epilog)
    add_common_arguments(parser)
    parser.add_argument("--data", help="Training dataset directory")
    parser.add_argument("--steps", type=int, help="Total number of training steps")
    parser.add_argument("-b", "--batch_size", type=int, help="Batch size")
    parser.add_argument("--lr", type=float, help="Learning rate")
    parser.add_argument("--checkpoint_every", type=int, help="Checkpoint cadence in steps")
    parser.add_argument("--device", help="cpu, cuda or auto")
    parser.add_argument("-n", "--n_workers", type=int, help="Number of batch assembly threads")
    parser.add_argument("--resume", help="Checkpoint to resume from, or 'latest' for the newest one in --out")
    parser.add_argument("--no_progress", action="store_true", help="Hide the progress bar")

    # parse arguments
    args = parser.parse_args()

    flags = {
        "train": {
            "seed": args.seed,
            "train_data": args.data,
            "total_steps": args.steps,
            "batch_size": args.batch_size,
            "learning_rate": args.lr,
            "checkpoint_every": args.checkpoint_every,
            "device": args.device,
            "n_workers": args.n_workers,
            "progress": False if args.no_progress else None,
        },
        "job": {"out": args.out, "resume": args.resume},
    }
    return run_command("maskfill_train", args, TRAIN_SECTIONS, flags, cmd_train, lambda c: c["train"].seed)
