"""Experiment commands: dataset generation, training, sampling, mask ladders and evaluation.

Every command takes its resolved configuration sections (see `maskfill.config`), writes the
configuration echo into its output directory first and then does its work.
"""
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch

from .config import write_config
from .errors import ConfigError, DatasetError
from .evalkit import EvalConfig, EvalItem, EvalReport, evaluate, load_probe, save_probe, train_probe
from .maskops import LadderConfig, mask_ladder
from .model import Condition, DenoiserConfig, null_condition
from .sampler import SampleConfig, SampleRequest, sample_inpaint, sample_many
from .schedule import ScheduleConfig
from .shapesdata import DatasetSpec, ShapesDataset, Vocabulary, caption_text, write_dataset
from .trainer import TrainConfig, latest_checkpoint, load_checkpoint, resolve_device, train
from .utilities import load_image, load_mask, save_image, save_mask, save_soft_mask, save_strip


@dataclass(frozen=True)
class GenDataJob:
    out: str = "data"
    heldout_samples: int = 500
    n_workers: int = 1


@dataclass(frozen=True)
class TrainJob:
    out: str = "runs/default"
    resume: Optional[str] = None


@dataclass(frozen=True)
class SampleJob:
    """Single mode uses image/mask/prompt; batch mode (data set) samples held-out shapes."""

    checkpoint: str = "runs/default"
    out: str = "samples"
    image: Optional[str] = None
    mask: Optional[str] = None
    prompt: str = ""
    s: Optional[int] = None
    data: Optional[str] = None
    num_samples: int = 50
    levels: Tuple[int, ...] = ()
    condition: str = "caption"
    # "other" prompts the next class of the vocabulary instead of the source object's own
    prompt_class: str = "source"
    compare_switch: bool = False
    device: str = "auto"

    def __post_init__(self):
        if self.image is None and self.data is None:
            raise ConfigError("job.image: set either an image (with job.mask) or a dataset in job.data")
        if self.image is not None and self.mask is None:
            raise ConfigError("job.mask: an input mask is required with job.image")
        if self.condition not in ("caption", "label"):
            raise ConfigError(f"job.condition: must be 'caption' or 'label', got {self.condition!r}")
        if self.prompt_class not in ("source", "other"):
            raise ConfigError(f"job.prompt_class: must be 'source' or 'other', got {self.prompt_class!r}")
        if self.num_samples < 1:
            raise ConfigError(f"job.num_samples: must be >= 1, got {self.num_samples}")


@dataclass(frozen=True)
class MaskLadderJob:
    mask: str = ""
    out: str = "ladder"

    def __post_init__(self):
        if not self.mask:
            raise ConfigError("job.mask: path to an input mask image is required")


@dataclass(frozen=True)
class EvalJob:
    samples: str = "samples"
    heldout_data: str = ""
    probe: str = ""
    out: str = "eval"


GEN_DATA_SECTIONS = {"dataset": DatasetSpec, "job": GenDataJob}
TRAIN_SECTIONS = {
    "train": TrainConfig,
    "model": DenoiserConfig,
    "schedule": ScheduleConfig,
    "ladder": LadderConfig,
    "job": TrainJob,
}
SAMPLE_SECTIONS = {"sample": SampleConfig, "job": SampleJob}
MASK_LADDER_SECTIONS = {"ladder": LadderConfig, "job": MaskLadderJob}
EVAL_SECTIONS = {"eval": EvalConfig, "job": EvalJob}

SAMPLE_RECORDS = "records.jsonl"


def cmd_gen_data(configs: Dict[str, Any]) -> Path:
    """Write the train and held-out splits of the shapes dataset

    Parameters
    ----------
    configs : Dict[str, Any]
        sections of GEN_DATA_SECTIONS

    Returns
    -------
    Path
        dataset root holding train/ and heldout/
    """
    spec: DatasetSpec = configs["dataset"]
    job: GenDataJob = configs["job"]
    out = Path(job.out)
    write_config(configs, out)
    write_dataset(spec, out / "train", "train", n_workers=job.n_workers)
    if job.heldout_samples > 0:
        heldout = replace(spec, num_samples=job.heldout_samples)
        write_dataset(heldout, out / "heldout", "heldout", n_workers=job.n_workers)
    return out


def cmd_train(configs: Dict[str, Any]) -> Path:
    """Train the inpainting denoiser into a run directory

    Parameters
    ----------
    configs : Dict[str, Any]
        sections of TRAIN_SECTIONS

    Returns
    -------
    Path
        run directory with metrics.tsv, checkpoints/ and manifest.json
    """
    job: TrainJob = configs["job"]
    train_cfg: TrainConfig = configs["train"]
    run_dir = Path(job.out)
    write_config(configs, run_dir)

    resume = None
    if job.resume == "latest":
        resume = latest_checkpoint(run_dir)
    elif job.resume:
        resume = Path(job.resume)

    logging.info(f"Loading training data from {train_cfg.train_data}...")
    dataset = ShapesDataset.from_directory(train_cfg.train_data)
    result = train(
        dataset,
        run_dir,
        train_cfg,
        configs["model"],
        configs["schedule"],
        configs["ladder"],
        resume_from=resume,
    )
    if result.records:
        logging.info(f"Final loss at step {result.records[-1].step}: {result.records[-1].total:.6f}")
    return run_dir


def resolve_checkpoint(path: str) -> Path:
    """A checkpoint file, or the newest checkpoint of a run directory"""
    p = Path(path)
    if p.is_dir():
        return latest_checkpoint(p)
    return p


def condition_for_token(vocab: Vocabulary, token: int) -> Condition:
    if token == 0:
        return null_condition()
    kind = "caption-template" if vocab.is_caption(token) else "class-label"
    return Condition(kind, int(token), vocab.decode(token))


def condition_for_prompt(vocab: Vocabulary, prompt: str) -> Condition:
    if not prompt.strip():
        return null_condition()
    return condition_for_token(vocab, vocab.encode(prompt))


def other_class_token(vocab: Vocabulary, token: int) -> int:
    """Token naming the next class of the vocabulary, with the same color for captions"""
    cls = vocab.class_of(token)
    if cls is None:
        raise ValueError("token: the null token names no class")
    other = vocab.classes[(vocab.classes.index(cls) + 1) % len(vocab.classes)]
    color = vocab.color_of(token)
    return vocab.encode(other if color is None else caption_text(color, other))


def _write_trace(trace: List[np.ndarray], out: Path, every: int) -> None:
    trace_dir = out / "trace"
    for n, prob in enumerate(trace):
        save_soft_mask(prob, trace_dir / f"step_{n:03d}.png")
    picked = [np.round(np.clip(p, 0, 1) * 255).astype(np.uint8) for p in trace[::every]]
    save_strip(picked, out / "trace_strip.png")


def cmd_sample(configs: Dict[str, Any]) -> Path:
    """Inpaint one image, or a batch of held-out shapes, with a trained checkpoint

    Parameters
    ----------
    configs : Dict[str, Any]
        sections of SAMPLE_SECTIONS

    Returns
    -------
    Path
        output directory
    """
    sample_cfg: SampleConfig = configs["sample"]
    job: SampleJob = configs["job"]
    out = Path(job.out)
    write_config(configs, out)

    ckpt_path = resolve_checkpoint(job.checkpoint)
    logging.info(f"Loading checkpoint {ckpt_path}...")
    ckpt = load_checkpoint(ckpt_path)
    device = resolve_device(job.device)
    model = ckpt.build_model(device)
    ladder = LadderConfig(**ckpt.configs["ladder"])
    vocab = Vocabulary(**ckpt.configs["vocabulary"])

    if job.data is None:
        x0 = torch.from_numpy(load_image(job.image))
        mask = load_mask(job.mask)
        s = ladder.S if job.s is None else job.s
        condition = condition_for_prompt(vocab, job.prompt)
        req = SampleRequest.from_config(x0, mask, s, condition, sample_cfg)
        result = sample_inpaint(model, req, ckpt.schedule, device=device, progress=True)
        save_image(result.image.numpy(), out / "output.png")
        save_mask(result.active_mask, out / "final_mask.png")
        if result.trace:
            _write_trace(result.trace, out, sample_cfg.trace_every)
        logging.info(f"Wrote {out / 'output.png'}")
        return out

    dataset = ShapesDataset.from_directory(job.data)
    ladder = ladder.scaled_to(dataset.resolution)
    levels = job.levels or (ladder.S,)
    variants = [("switch", sample_cfg.mask_switch_step)]
    if job.compare_switch:
        variants.append(("noswitch", 0))
    count = min(job.num_samples, len(dataset))
    if job.prompt_class == "other" and len(vocab.classes) < 2:
        raise ConfigError("job.prompt_class: 'other' needs at least two classes in the vocabulary")
    logging.info(f"Sampling {count} held-out shapes at levels {list(levels)} ({len(variants)} variant(s))...")

    requests: List[SampleRequest] = []
    records: List[Dict[str, Any]] = []
    masks: List[np.ndarray] = []
    for idx in range(count):
        source_token = int(dataset.caption_tokens[idx] if job.condition == "caption" else dataset.label_tokens[idx])
        token = source_token if job.prompt_class == "source" else other_class_token(vocab, source_token)
        condition = condition_for_token(vocab, token)
        x0 = torch.from_numpy(dataset.images[idx])
        for s in levels:
            mask = dataset.precision_mask(idx, s, ladder)
            for variant, switch_step in variants:
                req = SampleRequest.from_config(
                    x0, mask, s, condition, sample_cfg, mask_switch_step=switch_step, seed=sample_cfg.seed + idx
                )
                requests.append(req)
                masks.append(mask)
                records.append(
                    {
                        "sample_id": f"{idx:05d}_s{s}_{variant}",
                        "dataset_index": idx,
                        "s": int(s),
                        "variant": variant,
                        "token": condition.token_id,
                        "prompt": condition.prompt_text,
                        "class_index": vocab.class_index(token),
                        "source_class_index": vocab.class_index(int(dataset.label_tokens[idx])),
                        "color": vocab.color_of(token),
                        "seed": req.seed,
                    }
                )

    results = sample_many(model, requests, ckpt.schedule, device=device)
    with open(out / SAMPLE_RECORDS, "w") as f:
        for record, mask, result in zip(records, masks, results):
            idx = record["dataset_index"]
            sample_dir = out / record["sample_id"]
            save_image(dataset.images[idx], sample_dir / "x0.png")
            save_mask(mask, sample_dir / "input_mask.png")
            save_mask(dataset.masks[idx], sample_dir / "object_mask.png")
            save_image(result.image.numpy(), sample_dir / "output.png")
            save_mask(result.active_mask, sample_dir / "final_mask.png")
            if result.trace:
                _write_trace(result.trace, sample_dir, sample_cfg.trace_every)
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return out


def cmd_mask_ladder(configs: Dict[str, Any]) -> List[Path]:
    """Write every precision level of a mask file plus a strip of all levels

    Parameters
    ----------
    configs : Dict[str, Any]
        sections of MASK_LADDER_SECTIONS

    Returns
    -------
    List[Path]
        S + 1 level files, fine to coarse
    """
    ladder: LadderConfig = configs["ladder"]
    job: MaskLadderJob = configs["job"]
    out = Path(job.out)
    write_config(configs, out)

    mask_path = Path(job.mask)
    if not mask_path.exists():
        raise FileNotFoundError(f"mask file not found: {mask_path}")
    mask = load_mask(mask_path)
    # ladder values are given for the ladder resolution, rescale to the mask size
    ladder = ladder.scaled_to(max(mask.shape))
    levels = mask_ladder(mask, ladder)
    paths = []
    for s, level in enumerate(levels):
        path = out / f"level_{s}.png"
        save_mask(level, path)
        paths.append(path)
    save_strip([level.astype(np.uint8) * 255 for level in levels], out / "ladder_strip.png")
    logging.info(f"Wrote {len(paths)} mask levels to {out}")
    return paths


def read_sample_dir(samples: Path) -> List[EvalItem]:
    """Load the (x0, masks, output, prompt) tuples written by the sample batch mode"""
    records_path = samples / SAMPLE_RECORDS
    if not records_path.exists():
        raise FileNotFoundError(f"sample records not found: {records_path}")
    items = []
    with open(records_path, "r") as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            sample_dir = samples / record["sample_id"]
            files = {name: sample_dir / f"{name}.png" for name in ("x0", "input_mask", "object_mask", "output")}
            files["final_mask"] = sample_dir / "final_mask.png"
            for path in files.values():
                if not path.exists():
                    raise DatasetError(f"sample {record['sample_id']}: missing file {path}")
            items.append(
                EvalItem(
                    sample_id=record["sample_id"],
                    x0=load_image(files["x0"]),
                    input_mask=load_mask(files["input_mask"]),
                    output=load_image(files["output"]),
                    active_mask=load_mask(files["final_mask"]),
                    class_index=int(record["class_index"]),
                    object_mask=load_mask(files["object_mask"]),
                    variant=record.get("variant", "switch"),
                    s=record.get("s"),
                    object_color=record.get("color"),
                )
            )
    return items


def cmd_eval(configs: Dict[str, Any]) -> EvalReport:
    """Score a sample directory and write report.jsonl and summary.txt

    Parameters
    ----------
    configs : Dict[str, Any]
        sections of EVAL_SECTIONS

    Returns
    -------
    EvalReport
        the written report
    """
    eval_cfg: EvalConfig = configs["eval"]
    job: EvalJob = configs["job"]
    out = Path(job.out)
    write_config(configs, out)

    items = read_sample_dir(Path(job.samples))
    probe = None
    if job.probe and Path(job.probe).exists():
        probe = load_probe(job.probe)
    elif job.heldout_data:
        logging.info(f"Training shape probe on {job.heldout_data}...")
        probe = train_probe(ShapesDataset.from_directory(job.heldout_data), eval_cfg.probe)
        save_probe(probe, job.probe or out / "probe.pt")
    elif job.probe:
        raise FileNotFoundError(f"probe checkpoint not found: {job.probe}")
    else:
        logging.warning("No probe and no held-out data given, skipping prompt consistency")

    report = evaluate(items, eval_cfg, probe)
    report.config["samples"] = str(job.samples)
    report.write(out / "report.jsonl", out / "summary.txt")
    logging.info("Evaluation summary:\n" + report.summary())
    return report
