import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from tqdm import tqdm

from .concurrency import run_executor
from .config import to_plain
from .errors import CheckpointError, ConfigError, NonFiniteError
from .losses import LossConfig, total_loss
from .maskops import LadderConfig
from .model import DenoiserConfig, InpaintingUNet
from .schedule import NoiseSchedule, ScheduleConfig, masked_q_sample
from .shapesdata import ShapesDataset
from .utilities import PathLike, config_hash, seed_everything

CHECKPOINT_FORMAT = "maskfill-checkpoint/1"
CHECKPOINT_FIELDS = ("format", "step", "model_state", "optimizer_state", "configs", "schedule")

TASK_INPAINT = 0
TASK_TEXT_TO_IMAGE = 1

# random stream tag for batch assembly, keeps it apart from the dataset streams
BATCH_STREAM = 7

METRICS_HEADER = "step\ttask\tseg\tdice\ttotal\n"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 2e-4
    total_steps: int = 20000
    task_probabilities: Tuple[float, float] = (0.8, 0.2)
    cond_dropout_prob: float = 0.1
    caption_probability: float = 0.5
    use_precision_ladder: bool = True
    grad_clip: float = 1.0
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    checkpoint_every: int = 1000
    n_workers: int = 1
    device: str = "auto"
    train_data: str = "data/train"
    progress: bool = True

    def __post_init__(self):
        object.__setattr__(self, "task_probabilities", tuple(float(p) for p in self.task_probabilities))
        if len(self.task_probabilities) != 2 or any(p < 0 for p in self.task_probabilities):
            raise ConfigError(f"train.task_probabilities: need two non-negative values, got {self.task_probabilities}")
        if not math.isclose(sum(self.task_probabilities), 1.0, abs_tol=1e-9):
            raise ConfigError(f"train.task_probabilities: must sum to 1, got {sum(self.task_probabilities)}")
        for name in ("cond_dropout_prob", "caption_probability"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"train.{name}: must lie in [0, 1], got {value}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size: must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"train.learning_rate: must be positive, got {self.learning_rate}")
        if self.total_steps < 0:
            raise ConfigError(f"train.total_steps: must be >= 0, got {self.total_steps}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"train.checkpoint_every: must be >= 1, got {self.checkpoint_every}")
        if self.n_workers < 1:
            raise ConfigError(f"train.n_workers: must be >= 1, got {self.n_workers}")


@dataclass
class TrainingBatch:
    images: torch.Tensor  # (B, C, H, W)
    instance_masks: torch.Tensor  # (B, 1, H, W)
    precision_masks: torch.Tensor  # (B, 1, H, W)
    levels: torch.Tensor  # (B,)
    tokens: torch.Tensor  # (B,)
    tasks: torch.Tensor  # (B,)
    timesteps: torch.Tensor  # (B,)
    noise: torch.Tensor  # (B, C, H, W)
    prediction_weight: torch.Tensor  # (B,)
    sample_ids: torch.Tensor  # (B,)

    def to(self, device: torch.device) -> "TrainingBatch":
        return TrainingBatch(**{k: v.to(device) for k, v in self.__dict__.items()})

    def __len__(self) -> int:
        return int(self.images.shape[0])


@dataclass
class StepRecord:
    step: int
    inpaint_items: int
    batch_size: int
    seg: float
    dice: float
    total: float

    def row(self) -> str:
        return (
            f"{self.step}\tinpaint:{self.inpaint_items}/{self.batch_size}\t"
            f"{self.seg:.8f}\t{self.dice:.8f}\t{self.total:.8f}\n"
        )


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def item_rng(seed: int, counter: int) -> np.random.Generator:
    """Per-item generator keyed on (master seed, global item counter)"""
    return np.random.default_rng([seed, BATCH_STREAM, counter])


def _assemble_item(
    dataset: ShapesDataset, counter: int, cfg: TrainConfig, ladder: LadderConfig, num_timesteps: int
) -> Dict[str, Any]:
    rng = item_rng(cfg.seed, counter)
    # every draw happens unconditionally so the stream layout is the same for both tasks
    idx = int(rng.integers(len(dataset)))
    u_task = rng.random()
    s_draw = int(rng.integers(ladder.S + 1))
    u_caption = rng.random()
    t = int(rng.integers(1, num_timesteps + 1))
    u_drop = rng.random()
    noise = rng.standard_normal(dataset.images.shape[1:], dtype=np.float32)

    instance = dataset.masks[idx]
    if u_task < cfg.task_probabilities[0]:
        task = TASK_INPAINT
        s = s_draw if cfg.use_precision_ladder else 0
        mask = dataset.precision_mask(idx, s, ladder)
        token = dataset.caption_tokens[idx] if u_caption < cfg.caption_probability else dataset.label_tokens[idx]
        weight = float(cfg.loss.inpaint_prediction_loss)
    else:
        # text-to-image is inpainting with a full-frame mask at the coarsest level
        task = TASK_TEXT_TO_IMAGE
        s = ladder.S
        mask = np.ones_like(instance)
        token = dataset.caption_tokens[idx]
        weight = float(cfg.loss.text_to_image_prediction_loss)
    if u_drop < cfg.cond_dropout_prob:
        token = 0

    return {
        "images": dataset.images[idx],
        "instance_masks": instance[None].astype(np.float32),
        "precision_masks": mask[None].astype(np.float32),
        "levels": s,
        "tokens": int(token),
        "tasks": task,
        "timesteps": t,
        "noise": noise,
        "prediction_weight": weight,
        "sample_ids": idx,
    }


def assemble_batch(
    dataset: ShapesDataset, step: int, cfg: TrainConfig, ladder: LadderConfig, num_timesteps: int
) -> TrainingBatch:
    """Build the training batch of a given step

    All randomness of item i at step k comes from the generator keyed on
    (cfg.seed, k * batch_size + i), so batches are reproducible and can be assembled
    by several workers in any order.

    Parameters
    ----------
    dataset : ShapesDataset
        training data
    step : int
        1-based training step
    cfg : TrainConfig
        training configuration
    ladder : LadderConfig
        precision ladder
    num_timesteps : int
        T of the noise schedule

    Returns
    -------
    TrainingBatch
        CPU tensors
    """
    first = (step - 1) * cfg.batch_size
    items = run_executor(
        cfg.n_workers,
        "thread",
        _assemble_item,
        ((dataset, first + i, cfg, ladder, num_timesteps) for i in range(cfg.batch_size)),
    )
    stacked = {}
    for key in items[0]:
        values = [item[key] for item in items]
        if isinstance(values[0], np.ndarray):
            stacked[key] = torch.from_numpy(np.stack(values))
        elif key == "prediction_weight":
            stacked[key] = torch.tensor(values, dtype=torch.float32)
        else:
            stacked[key] = torch.tensor(values, dtype=torch.long)
    return TrainingBatch(**stacked)


def training_step(
    model: InpaintingUNet,
    optimizer: torch.optim.Optimizer,
    batch: TrainingBatch,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    step: int,
) -> StepRecord:
    """One optimizer update on a batch

    Parameters
    ----------
    model : InpaintingUNet
        denoiser, updated in place
    optimizer : torch.optim.Optimizer
        optimizer over the model parameters
    batch : TrainingBatch
        batch on the model's device
    sched : NoiseSchedule
        noise schedule
    cfg : TrainConfig
        training configuration
    step : int
        step number for the record

    Returns
    -------
    StepRecord
        loss components of this step (computed before the update)
    """
    model.train()
    x_t = masked_q_sample(batch.images, batch.precision_masks, batch.timesteps, batch.noise, sched)
    out = model(x_t, batch.precision_masks, batch.timesteps, batch.tokens, batch.levels)
    losses = total_loss(batch.noise, out, batch.instance_masks, cfg.loss, batch.prediction_weight)

    inpaint_items = int((batch.tasks == TASK_INPAINT).sum())
    if not torch.isfinite(losses.total):
        t = batch.timesteps.double()
        record = {
            "step": step,
            "inpaint_items": inpaint_items,
            "batch_size": len(batch),
            "t_min": int(t.min()),
            "t_max": int(t.max()),
            "t_mean": float(t.mean()),
            "seg": float(losses.seg),
            "dice": float(losses.dice),
        }
        raise NonFiniteError(f"non-finite loss at step {step}: {record}", record)

    optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()

    values = losses.as_floats()
    return StepRecord(step, inpaint_items, len(batch), values["seg"], values["dice"], values["total"])


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)


@dataclass
class Checkpoint:
    step: int
    model_state: Dict[str, torch.Tensor]
    optimizer_state: Dict[str, Any]
    configs: Dict[str, Any]
    schedule: NoiseSchedule

    @property
    def model_config(self) -> DenoiserConfig:
        return DenoiserConfig(**self.configs["model"])

    def build_model(self, device: Optional[torch.device] = None) -> InpaintingUNet:
        """Rebuild the denoiser with the stored weights, in inference mode"""
        model = InpaintingUNet(self.model_config)
        model.load_state_dict(self.model_state)
        if device is not None:
            model.to(device)
        return model.eval()


def save_checkpoint(
    path: PathLike,
    model: InpaintingUNet,
    optimizer: Optional[torch.optim.Optimizer],
    configs: Dict[str, Any],
    step: int,
    sched: NoiseSchedule,
) -> Path:
    """Write a versioned, self-describing training checkpoint

    Parameters
    ----------
    path : PathLike
        archive path
    model : InpaintingUNet
        denoiser
    optimizer : torch.optim.Optimizer, optional
        optimizer whose state should be resumable
    configs : Dict[str, Any]
        plain dict config sections (must contain "model")
    step : int
        number of completed training steps
    sched : NoiseSchedule
        noise schedule

    Returns
    -------
    Path
        the written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    configs = dict(configs)
    configs["model"] = asdict(model.config)
    archive = {
        "format": CHECKPOINT_FORMAT,
        "step": int(step),
        "model_state": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "optimizer_state": optimizer.state_dict() if optimizer is not None else {},
        "configs": to_plain(configs),
        "schedule": sched.to_dict(),
    }
    torch.save(archive, str(path))
    return path


def load_checkpoint(path: PathLike) -> Checkpoint:
    """Read and validate a checkpoint written by `save_checkpoint`"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        archive = torch.load(str(path), map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"{path}: unreadable checkpoint archive ({e})") from e
    if not isinstance(archive, dict):
        raise CheckpointError(f"{path}: checkpoint archive is not a mapping")
    if archive.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: format: expected {CHECKPOINT_FORMAT!r}, got {archive.get('format')!r}")
    for name in CHECKPOINT_FIELDS:
        if name not in archive:
            raise CheckpointError(f"{path}: {name}: missing from checkpoint")
    if "model" not in archive["configs"]:
        raise CheckpointError(f"{path}: configs.model: missing from checkpoint")
    try:
        schedule = NoiseSchedule.from_dict(archive["schedule"])
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: schedule: invalid ({e})") from e
    return Checkpoint(
        step=int(archive["step"]),
        model_state=archive["model_state"],
        optimizer_state=archive["optimizer_state"],
        configs=archive["configs"],
        schedule=schedule,
    )


def _update_manifest(run_dir: Path, step: int, checkpoint: Path, digest: str) -> None:
    manifest_path = run_dir / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path, "r") as f:
            manifest = json.load(f)
    else:
        manifest = {"config_hash": digest, "checkpoints": []}
    manifest["config_hash"] = digest
    manifest["checkpoints"] = [c for c in manifest["checkpoints"] if c["step"] != step]
    manifest["checkpoints"].append(
        {"step": step, "path": str(checkpoint.relative_to(run_dir)), "config_hash": digest}
    )
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)


def checkpoint_path(run_dir: PathLike, step: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"step_{step:07d}.pt"


def latest_checkpoint(run_dir: PathLike) -> Path:
    """Newest checkpoint listed in a run directory's manifest"""
    manifest_path = Path(run_dir) / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"run manifest not found: {manifest_path}")
    with open(manifest_path, "r") as f:
        manifest = json.load(f)
    if not manifest.get("checkpoints"):
        raise CheckpointError(f"{manifest_path}: checkpoints: no checkpoint listed")
    newest = max(manifest["checkpoints"], key=lambda c: c["step"])
    return Path(run_dir) / newest["path"]


def _check_resumable(path: PathLike, ckpt: Checkpoint, configs: Dict[str, Any], sched: NoiseSchedule) -> None:
    """A run can only continue with the schedule and denoiser it was started with"""
    for name in ("schedule", "model"):
        stored = ckpt.configs.get(name)
        if stored is not None and stored != to_plain(configs[name]):
            raise CheckpointError(f"{path}: configs.{name}: checkpoint was trained with {stored}")
    if not np.array_equal(ckpt.schedule.betas, sched.betas):
        raise CheckpointError(f"{path}: schedule: stored betas differ from the configured schedule")


@dataclass
class TrainResult:
    model: InpaintingUNet
    records: List[StepRecord]
    checkpoints: List[Path]


def train(
    dataset: ShapesDataset,
    run_dir: PathLike,
    train_cfg: TrainConfig,
    model_cfg: DenoiserConfig,
    schedule_cfg: ScheduleConfig,
    ladder_cfg: LadderConfig,
    resume_from: Optional[PathLike] = None,
) -> TrainResult:
    """Multi-task training loop with metrics log and periodic checkpoints

    Parameters
    ----------
    dataset : ShapesDataset
        training data
    run_dir : PathLike
        run directory receiving metrics.tsv, checkpoints/ and manifest.json
    train_cfg : TrainConfig
        training configuration
    model_cfg : DenoiserConfig
        denoiser configuration; vocabulary size, levels, timesteps and resolution are
        taken from the data, ladder and schedule
    schedule_cfg : ScheduleConfig
        noise schedule configuration
    ladder_cfg : LadderConfig
        precision ladder configuration, rescaled to the data resolution
    resume_from : PathLike, optional
        checkpoint to continue from; its schedule and denoiser configuration must match

    Returns
    -------
    TrainResult
        trained model, step records of this invocation, written checkpoints
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    device = resolve_device(train_cfg.device)
    seed_everything(train_cfg.seed)

    sched = schedule_cfg.build()
    ladder_cfg = ladder_cfg.scaled_to(dataset.resolution)
    model_cfg = replace(
        model_cfg,
        vocab_size=len(dataset.vocab),
        num_levels=ladder_cfg.S,
        num_timesteps=sched.T,
        resolution=dataset.resolution,
        image_channels=int(dataset.images.shape[1]),
    )
    configs = {
        "train": asdict(train_cfg),
        "model": asdict(model_cfg),
        "schedule": asdict(schedule_cfg),
        "ladder": asdict(ladder_cfg),
        "vocabulary": {"classes": list(dataset.vocab.classes), "colors": list(dataset.vocab.colors)},
    }
    digest = config_hash(to_plain(configs))

    model = InpaintingUNet(model_cfg).to(device)
    optimizer = make_optimizer(model, train_cfg)
    start = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        _check_resumable(resume_from, ckpt, configs, sched)
        model.load_state_dict(ckpt.model_state)
        optimizer.load_state_dict(ckpt.optimizer_state)
        start = ckpt.step
        logging.info(f"Resuming from {resume_from} at step {start}")
    logging.info(f"Denoiser has {model.num_parameters()} parameters, training on {device}")

    metrics_path = run_dir / "metrics.tsv"
    if start == 0 or not metrics_path.exists():
        with open(metrics_path, "w") as f:
            f.write(METRICS_HEADER)

    records: List[StepRecord] = []
    checkpoints: List[Path] = []
    steps = range(start + 1, train_cfg.total_steps + 1)
    progress = tqdm(steps, disable=not train_cfg.progress, desc="train")
    with open(metrics_path, "a") as metrics:
        for step in progress:
            batch = assemble_batch(dataset, step, train_cfg, ladder_cfg, sched.T).to(device)
            record = training_step(model, optimizer, batch, sched, train_cfg, step)
            records.append(record)
            metrics.write(record.row())
            metrics.flush()
            progress.set_postfix(loss=f"{record.total:.4f}")

            if step % train_cfg.checkpoint_every == 0 or step == train_cfg.total_steps:
                path = save_checkpoint(checkpoint_path(run_dir, step), model, optimizer, configs, step, sched)
                _update_manifest(run_dir, step, path, digest)
                checkpoints.append(path)
                logging.info(f"Saved checkpoint: {path}")

    return TrainResult(model=model.eval(), records=records, checkpoints=checkpoints)
