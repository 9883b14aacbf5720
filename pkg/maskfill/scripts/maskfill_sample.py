import argparse

from maskfill.commands import SAMPLE_SECTIONS, cmd_sample

from . import add_common_arguments, epilog, run_command


def main():
    parser = argparse.ArgumentParser(description="Inpaint with a trained checkpoint", epilog=epilog)
    add_common_arguments(parser)
    parser.add_argument("--checkpoint", help="Checkpoint file or run directory (newest checkpoint)")
    parser.add_argument("--image", help="Source image file")
    parser.add_argument("--mask", help="Input mask image file")
    parser.add_argument("--prompt", help="Prompt, a class name or 'a <color> <class>'")
    parser.add_argument("-s", "--precision", type=int, help="Precision level of the input mask (default: S)")
    parser.add_argument("--data", help="Held-out dataset directory for batch sampling")
    parser.add_argument("--num_samples", type=int, help="Number of held-out samples in batch mode")
    parser.add_argument("--levels", type=int, nargs="+", help="Precision levels to sample in batch mode")
    parser.add_argument("--compare_switch", action="store_true", help="Also sample with the mask switch disabled")
    parser.add_argument(
        "--prompt_class",
        choices=["source", "other"],
        help="Prompt the source object class or the next class of the vocabulary in batch mode",
    )
    parser.add_argument("--steps", type=int, help="Number of sampling steps")
    parser.add_argument("-w", "--guidance", type=float, help="Guidance scale")
    parser.add_argument("--switch_step", type=int, help="Step after which the predicted mask is used (0: never)")
    parser.add_argument("--sampler", choices=["ancestral", "deterministic-skip"], help="Reverse step kind")
    parser.add_argument("--trace", action="store_true", help="Write the per-step predicted masks")
    parser.add_argument("--device", help="cpu, cuda or auto")

    # parse arguments
    args = parser.parse_args()

    flags = {
        "sample": {
            "seed": args.seed,
            "steps": args.steps,
            "guidance_scale": args.guidance,
            "mask_switch_step": args.switch_step,
            "sampler": args.sampler,
            "trace": True if args.trace else None,
        },
        "job": {
            "out": args.out,
            "checkpoint": args.checkpoint,
            "image": args.image,
            "mask": args.mask,
            "prompt": args.prompt,
            "s": args.precision,
            "data": args.data,
            "num_samples": args.num_samples,
            "levels": args.levels,
            "compare_switch": True if args.compare_switch else None,
            "prompt_class": args.prompt_class,
            "device": args.device,
        },
    }
    return run_command("maskfill_sample", args, SAMPLE_SECTIONS, flags, cmd_sample, lambda c: c["sample"].seed)
