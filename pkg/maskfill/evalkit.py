"""Evaluation metrics: mask IoU, background preservation, global and local FID, probe accuracy.

Report files
------------
``report.jsonl`` holds one JSON record per evaluated sample followed by a single final line
``{"aggregate": {...}, "config": {...}}``. ``summary.txt`` is the same aggregate block as a
plain text table.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import numpy.typing as npt
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.linalg import eigh
from skimage.transform import resize  # type: ignore

from .concurrency import run_executor
from .errors import CheckpointError, ConfigError, ProbeUnreliableError
from .maskops import as_binary, bounding_box, iou
from .shapesdata import COLOR_TABLE, ShapesDataset
from .utilities import PathLike

FID_JITTER = 1e-6
PROBE_FORMAT = "maskfill-probe/1"

FeatureExtractor = Callable[[npt.NDArray], npt.NDArray]


def _as_numpy(image) -> npt.NDArray[np.float64]:
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    return np.asarray(image, dtype=np.float64)


def background_mse(output: npt.ArrayLike, x0: npt.ArrayLike, object_mask: npt.ArrayLike) -> float:
    """Mean squared error between output and source over the pixels outside a mask

    Parameters
    ----------
    output : npt.ArrayLike
        (C, H, W) generated image
    x0 : npt.ArrayLike
        (C, H, W) source image
    object_mask : npt.ArrayLike
        (H, W) binary mask of the pixels to ignore

    Returns
    -------
    float
        mean over every channel of every pixel where object_mask == 0
    """
    return region_mse(output, x0, ~as_binary(object_mask, "object_mask"))


def region_mse(output: npt.ArrayLike, x0: npt.ArrayLike, region: npt.ArrayLike) -> float:
    """Mean squared error between output and source over a pixel region"""
    output = _as_numpy(output)
    x0 = _as_numpy(x0)
    region = as_binary(region, "region")
    if output.shape != x0.shape:
        raise ValueError(f"x0: shape {x0.shape} does not match output {output.shape}")
    if region.shape != output.shape[-2:]:
        raise ValueError(f"mask: shape {region.shape} does not match image {output.shape[-2:]}")
    if not region.any():
        raise ValueError("mask: no pixel left to compare, the region is empty")
    diff = (output - x0)[..., region]
    return float(np.mean(diff**2))


def box_background_mse(
    output: npt.ArrayLike, x0: npt.ArrayLike, input_mask: npt.ArrayLike, object_mask: npt.ArrayLike
) -> float:
    """Error on the background pixels that lie inside the input mask

    This is the part of the background a coarse mask hands to the generator, so it measures how
    much of it the sampler preserved.
    """
    region = as_binary(input_mask, "input_mask") & ~as_binary(object_mask, "object_mask")
    return region_mse(output, x0, region)


def crop_box(image: npt.ArrayLike, mask: npt.ArrayLike) -> npt.NDArray[np.float64]:
    """(C, H, W) image cropped to the bounding box of a non-empty mask"""
    image = _as_numpy(image)
    mask = as_binary(mask)
    if not mask.any():
        raise ValueError("mask: cannot crop to an empty mask")
    r0, c0, r1, c1 = bounding_box(mask)
    return image[:, r0:r1, c0:c1]


def local_crop(image: npt.ArrayLike, mask: npt.ArrayLike, size: int = 32) -> npt.NDArray[np.float64]:
    """Crop an image to the bounding box of a mask and resize it bilinearly

    Parameters
    ----------
    image : npt.ArrayLike
        (C, H, W) image
    mask : npt.ArrayLike
        (H, W) non-empty binary mask
    size : int, optional
        evaluation resolution, by default 32

    Returns
    -------
    npt.NDArray[np.float64]
        (C, size, size) crop
    """
    crop = crop_box(image, mask)
    resized = resize(
        crop.transpose(1, 2, 0),
        (size, size),
        order=1,
        mode="edge",
        anti_aliasing=False,
        preserve_range=True,
    )
    return np.ascontiguousarray(resized.transpose(2, 0, 1))


def pixel_features(images: npt.ArrayLike, size: int = 8) -> npt.NDArray[np.float64]:
    """Default feature extractor: images downsampled to size x size and flattened

    Parameters
    ----------
    images : npt.ArrayLike
        (N, C, H, W) images
    size : int, optional
        downsampled side length, by default 8

    Returns
    -------
    npt.NDArray[np.float64]
        (N, C * size * size) features
    """
    images = _as_numpy(images)
    if images.ndim != 4:
        raise ValueError(f"images: expected shape (N, C, H, W), got {images.shape}")
    features = []
    for image in images:
        small = resize(image.transpose(1, 2, 0), (size, size), order=1, anti_aliasing=True, preserve_range=True)
        features.append(small.reshape(-1))
    return np.stack(features)


@dataclass
class FIDRecord:
    value: float
    jitter: float = 0.0


def _sqrtm_psd(cov: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    values, vectors = eigh(cov)
    values = np.clip(values, 0.0, None)
    return (vectors * np.sqrt(values)) @ vectors.T


def _trace_sqrt_product(cov_a: npt.NDArray[np.float64], cov_b: npt.NDArray[np.float64]) -> float:
    # Tr((A B)^1/2) = Tr((A^1/2 B A^1/2)^1/2), the inner product is symmetric PSD
    root_a = _sqrtm_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    values = eigh((inner + inner.T) / 2.0, eigvals_only=True)
    return float(np.sum(np.sqrt(np.clip(values, 0.0, None))))


def frechet_distance(features_a: npt.ArrayLike, features_b: npt.ArrayLike) -> FIDRecord:
    """Frechet distance between Gaussians fitted to two feature sets

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^1/2). Singular covariances get a 1e-6 diagonal
    jitter, which is reported in the record.

    Parameters
    ----------
    features_a : npt.ArrayLike
        (N_a, D) features, N_a >= 2
    features_b : npt.ArrayLike
        (N_b, D) features, N_b >= 2

    Returns
    -------
    FIDRecord
        non-negative distance and the jitter used
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError(f"features: need at least 2 vectors per set, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"features_b: dimension {b.shape[1]} does not match features_a {a.shape[1]}")

    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))

    jitter = 0.0
    smallest = min(eigh(cov_a, eigvals_only=True)[0], eigh(cov_b, eigvals_only=True)[0])
    if smallest <= FID_JITTER:
        jitter = FID_JITTER
        logging.info(f"Singular covariance in FID, adding {jitter} to the diagonal")
        eye = np.eye(cov_a.shape[0])
        cov_a = cov_a + jitter * eye
        cov_b = cov_b + jitter * eye

    # both orderings, so the result is symmetric to rounding
    trace_sqrt = 0.5 * (_trace_sqrt_product(cov_a, cov_b) + _trace_sqrt_product(cov_b, cov_a))
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
    return FIDRecord(value=max(value, 0.0), jitter=jitter)


def fid(features_a: npt.ArrayLike, features_b: npt.ArrayLike) -> float:
    """Frechet distance of two feature sets, see `frechet_distance`"""
    return frechet_distance(features_a, features_b).value


@dataclass(frozen=True)
class ProbeConfig:
    crop_size: int = 32
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    validation_fraction: float = 0.2
    min_accuracy: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError(f"probe.validation_fraction: must lie in (0, 1), got {self.validation_fraction}")
        if not 0.0 <= self.min_accuracy <= 1.0:
            raise ConfigError(f"probe.min_accuracy: must lie in [0, 1], got {self.min_accuracy}")
        for name in ("crop_size", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"probe.{name}: must be >= 1, got {getattr(self, name)}")


class ShapeProbe(nn.Module):
    """Small convolutional shape classifier over local crops."""

    def __init__(self, num_classes: int, channels: int = 3):
        super().__init__()
        self.num_classes = num_classes
        self.features = nn.Sequential(
            nn.Conv2d(channels, 16, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1),
            nn.ReLU(),
        )
        self.head = nn.Linear(64, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x).mean(dim=(2, 3)))


@dataclass
class TrainedProbe:
    model: ShapeProbe
    classes: List[str]
    accuracy: float
    config: ProbeConfig = field(default_factory=ProbeConfig)
    validation_indices: List[int] = field(default_factory=list)

    def check_reliable(self) -> None:
        if self.accuracy < self.config.min_accuracy:
            raise ProbeUnreliableError(
                f"probe held-out accuracy {self.accuracy:.3f} is below {self.config.min_accuracy:.3f}, "
                "refusing to score prompt consistency"
            )


def probe_crops(images: npt.ArrayLike, masks: npt.ArrayLike, size: int) -> npt.NDArray[np.float32]:
    """Local crops of a batch of (image, mask) pairs as probe input"""
    return np.stack([local_crop(image, mask, size) for image, mask in zip(images, masks)]).astype(np.float32)


@torch.no_grad()
def probe_predict(model: ShapeProbe, crops: npt.ArrayLike, batch_size: int = 256) -> npt.NDArray[np.int64]:
    model.eval()
    crops = torch.as_tensor(np.asarray(crops, dtype=np.float32))
    predictions = [model(chunk).argmax(dim=1) for chunk in torch.split(crops, batch_size)]
    return torch.cat(predictions).numpy().astype(np.int64)


def train_probe(dataset: ShapesDataset, cfg: ProbeConfig = ProbeConfig()) -> TrainedProbe:
    """Train the shape probe on real samples and measure it on a held-back part of them

    Parameters
    ----------
    dataset : ShapesDataset
        real samples, normally the held-out split of the shapes data
    cfg : ProbeConfig, optional
        training parameters

    Returns
    -------
    TrainedProbe
        classifier with its validation accuracy
    """
    rng = np.random.default_rng(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    vocab = dataset.vocab
    labels = np.array([vocab.class_index(int(token)) for token in dataset.label_tokens], dtype=np.int64)
    crops = probe_crops(dataset.images, dataset.masks, cfg.crop_size)

    order = rng.permutation(len(dataset))
    n_val = max(1, int(round(cfg.validation_fraction * len(dataset))))
    if n_val >= len(dataset):
        raise ValueError(f"dataset: {len(dataset)} samples are too few to hold back a validation part")
    val_idx, train_idx = order[:n_val], order[n_val:]

    torch.manual_seed(cfg.seed)
    model = ShapeProbe(len(vocab.classes), channels=crops.shape[1])
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    x_train = torch.from_numpy(crops[train_idx])
    y_train = torch.from_numpy(labels[train_idx])
    for _ in range(cfg.epochs):
        model.train()
        perm = torch.randperm(len(train_idx), generator=generator)
        for chunk in torch.split(perm, cfg.batch_size):
            loss = F.cross_entropy(model(x_train[chunk]), y_train[chunk])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

    accuracy = float(np.mean(probe_predict(model, crops[val_idx]) == labels[val_idx]))
    logging.info(f"Probe validation accuracy: {accuracy:.4f} on {n_val} samples")
    return TrainedProbe(
        model=model.eval(),
        classes=list(vocab.classes),
        accuracy=accuracy,
        config=cfg,
        validation_indices=[int(i) for i in val_idx],
    )


def probe_accuracy(probe: TrainedProbe, crops: npt.ArrayLike, class_indices: Sequence[int]) -> float:
    """Fraction of crops whose predicted class equals the prompted class

    Parameters
    ----------
    probe : TrainedProbe
        reliable probe
    crops : npt.ArrayLike
        (N, C, size, size) local crops of generated objects
    class_indices : Sequence[int]
        prompted class per crop

    Returns
    -------
    float
        accuracy in [0, 1]
    """
    probe.check_reliable()
    predicted = probe_predict(probe.model, crops)
    return float(np.mean(predicted == np.asarray(class_indices, dtype=np.int64)))


def save_probe(probe: TrainedProbe, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": PROBE_FORMAT,
            "state": probe.model.state_dict(),
            "classes": probe.classes,
            "accuracy": probe.accuracy,
            "config": asdict(probe.config),
            "validation_indices": probe.validation_indices,
        },
        str(path),
    )
    return path


def load_probe(path: PathLike) -> TrainedProbe:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"probe checkpoint not found: {path}")
    archive = torch.load(str(path), map_location="cpu", weights_only=True)
    if not isinstance(archive, dict) or archive.get("format") != PROBE_FORMAT:
        raise CheckpointError(f"{path}: format: expected {PROBE_FORMAT!r}")
    for name in ("state", "classes", "accuracy", "config"):
        if name not in archive:
            raise CheckpointError(f"{path}: {name}: missing from probe checkpoint")
    model = ShapeProbe(len(archive["classes"]))
    model.load_state_dict(archive["state"])
    return TrainedProbe(
        model=model.eval(),
        classes=list(archive["classes"]),
        accuracy=float(archive["accuracy"]),
        config=ProbeConfig(**archive["config"]),
        validation_indices=list(archive.get("validation_indices", [])),
    )


def palette_value(color: str) -> npt.NDArray[np.float64]:
    """RGB of a named object color in the [-1, 1] image range"""
    if color not in COLOR_TABLE:
        raise ValueError(f"color: unknown color {color!r}, expected one of {tuple(COLOR_TABLE)}")
    return 2.0 * np.asarray(COLOR_TABLE[color], dtype=np.float64) - 1.0


def output_support(
    output: npt.ArrayLike, input_mask: npt.ArrayLike, color: Optional[str] = None, tolerance: float = 0.25
) -> npt.NDArray[np.bool_]:
    """Pixels of the input mask that the generated image filled with the object color

    Parameters
    ----------
    output : npt.ArrayLike
        (3, H, W) generated image in [-1, 1]
    input_mask : npt.ArrayLike
        (H, W) binary mask handed to the sampler
    color : str, optional
        prompted color name; when None the palette color covering most of the input mask is used
    tolerance : float, optional
        largest Euclidean RGB distance to the object color, by default 0.25

    Returns
    -------
    npt.NDArray[np.bool_]
        (H, W) estimated object support, always inside input_mask
    """
    output = _as_numpy(output)
    input_mask = as_binary(input_mask, "input_mask")
    if output.ndim != 3 or output.shape[0] != 3:
        raise ValueError(f"output: expected shape (3, H, W), got {output.shape}")
    if input_mask.shape != output.shape[-2:]:
        raise ValueError(f"input_mask: shape {input_mask.shape} does not match image {output.shape[-2:]}")
    if tolerance <= 0:
        raise ValueError(f"tolerance: must be positive, got {tolerance}")

    def within(name: str) -> npt.NDArray[np.bool_]:
        distance = np.linalg.norm(output - palette_value(name)[:, None, None], axis=0)
        return (distance < tolerance) & input_mask

    if color is not None:
        return within(color)
    candidates = [within(name) for name in COLOR_TABLE]
    return max(candidates, key=lambda m: int(m.sum()))


@dataclass
class EvalItem:
    """One evaluated inpainting result; object_mask is the true object support when known."""

    sample_id: str
    x0: npt.NDArray
    input_mask: npt.NDArray[np.bool_]
    output: npt.NDArray
    active_mask: npt.NDArray[np.bool_]
    class_index: int
    object_mask: Optional[npt.NDArray[np.bool_]] = None
    variant: str = "switch"
    s: Optional[int] = None
    # color named by the prompt, None when the prompt was a bare class label
    object_color: Optional[str] = None


@dataclass(frozen=True)
class EvalConfig:
    eval_resolution: int = 32
    feature_size: int = 8
    n_workers: int = 1
    color_tolerance: float = 0.25
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self):
        if self.eval_resolution < 1 or self.feature_size < 1:
            raise ConfigError("eval.eval_resolution / eval.feature_size: must be >= 1")
        if self.n_workers < 1:
            raise ConfigError(f"eval.n_workers: must be >= 1, got {self.n_workers}")
        if self.color_tolerance <= 0:
            raise ConfigError(f"eval.color_tolerance: must be positive, got {self.color_tolerance}")


AGGREGATED_FIELDS = ("iou", "input_iou", "background_mse", "box_background_mse", "probe_correct")

# per precision level only the shape-following fields are summarized
LEVEL_FIELDS = ("iou", "input_iou")


@dataclass
class EvalReport:
    records: List[Dict]
    aggregate: Dict[str, float]
    config: Dict = field(default_factory=dict)

    def write(self, report_path: PathLike, summary_path: Optional[PathLike] = None) -> None:
        report_path = Path(report_path)
        report_path.parent.mkdir(parents=True, exist_ok=True)
        with open(report_path, "w") as f:
            for record in self.records:
                f.write(json.dumps(record, sort_keys=True) + "\n")
            f.write(json.dumps({"aggregate": self.aggregate, "config": self.config}, sort_keys=True) + "\n")
        if summary_path is not None:
            Path(summary_path).write_text(self.summary())

    def summary(self) -> str:
        width = max(len(k) for k in self.aggregate) if self.aggregate else 8
        lines = [f"{'metric'.ljust(width)}  value", f"{'-' * width}  {'-' * 12}"]
        for key in sorted(self.aggregate):
            lines.append(f"{key.ljust(width)}  {self.aggregate[key]:.6g}")
        return "\n".join(lines) + "\n"


def read_report(path: PathLike) -> EvalReport:
    with open(path, "r") as f:
        rows = [json.loads(line) for line in f if line.strip()]
    if not rows or "aggregate" not in rows[-1]:
        raise ValueError(f"{path}: missing aggregate block")
    return EvalReport(records=rows[:-1], aggregate=rows[-1]["aggregate"], config=rows[-1].get("config", {}))


def _summarize(rows: Sequence[Dict], names: Sequence[str], prefix: str, aggregate: Dict[str, float]) -> None:
    for name in names:
        values = [float(r[name]) for r in rows if r.get(name) is not None]
        if values:
            aggregate[f"{prefix}{name}_mean"] = float(np.mean(values))
            aggregate[f"{prefix}{name}_median"] = float(np.median(values))


def aggregate_records(records: Sequence[Dict]) -> Dict[str, float]:
    """Means and medians of the per-sample metrics, grouped by sampler variant

    Keys are ``<field>_mean`` / ``<field>_median``, prefixed with ``<variant>/`` when several
    variants are present. When records span several precision levels, the shape-following
    fields are also summarized per level under ``[<variant>/]s<level>/``.
    """
    aggregate: Dict[str, float] = {"num_samples": float(len(records))}
    variants = sorted({r.get("variant", "switch") for r in records})
    for variant in variants:
        rows = [r for r in records if r.get("variant", "switch") == variant]
        prefix = "" if len(variants) == 1 else f"{variant}/"
        _summarize(rows, AGGREGATED_FIELDS, prefix, aggregate)
        levels = sorted({int(r["s"]) for r in rows if r.get("s") is not None})
        if len(levels) > 1:
            for level in levels:
                _summarize([r for r in rows if r.get("s") == level], LEVEL_FIELDS, f"{prefix}s{level}/", aggregate)
    return aggregate


def _score_item(item: EvalItem, probe: Optional[TrainedProbe], cfg: EvalConfig) -> Dict:
    size = cfg.eval_resolution
    support = output_support(item.output, item.input_mask, item.object_color, cfg.color_tolerance)
    record: Dict = {
        "sample_id": item.sample_id,
        "variant": item.variant,
        "class_index": int(item.class_index),
        "s": item.s,
        # how closely the generated object follows the input mask
        "input_iou": iou(support, item.input_mask),
    }
    if item.object_mask is not None:
        record["iou"] = iou(item.active_mask, item.object_mask)
        record["background_mse"] = background_mse(item.output, item.x0, item.object_mask)
        record["box_background_mse"] = None
        # an accurate (s = 0) input mask leaves no background inside it
        if (as_binary(item.input_mask) & ~as_binary(item.object_mask)).any():
            record["box_background_mse"] = box_background_mse(
                item.output, item.x0, item.input_mask, item.object_mask
            )
    else:
        record["iou"] = None
        record["background_mse"] = background_mse(item.output, item.x0, item.active_mask)
        record["box_background_mse"] = None
    if probe is not None:
        crop = local_crop(item.output, item.input_mask, size)[None].astype(np.float32)
        predicted = int(probe_predict(probe.model, crop)[0])
        record["probe_class"] = predicted
        record["probe_correct"] = float(predicted == item.class_index)
    return record


def evaluate(
    items: Sequence[EvalItem],
    cfg: EvalConfig = EvalConfig(),
    probe: Optional[TrainedProbe] = None,
    feature_extractor: Optional[FeatureExtractor] = None,
) -> EvalReport:
    """Score a set of inpainting results

    Parameters
    ----------
    items : Sequence[EvalItem]
        results to score
    cfg : EvalConfig, optional
        evaluation parameters
    probe : TrainedProbe, optional
        reliable shape probe; prompt consistency is skipped without one
    feature_extractor : FeatureExtractor, optional
        (N, C, H, W) -> (N, D) features for FID, by default `pixel_features`

    Returns
    -------
    EvalReport
        per-sample records and aggregates, FID over the "switch" variant (or all items)
    """
    if not items:
        raise ValueError("items: nothing to evaluate")
    if probe is not None:
        probe.check_reliable()
    if feature_extractor is None:

        def feature_extractor(images):
            return pixel_features(images, cfg.feature_size)

    records = run_executor(
        cfg.n_workers, "thread", _score_item, ((item, probe, cfg) for item in items)
    )
    aggregate = aggregate_records(records)

    fid_items = [item for item in items if item.variant == "switch"] or list(items)
    if len(fid_items) >= 2:
        size = cfg.eval_resolution
        real_local = np.stack([local_crop(i.x0, i.input_mask, size) for i in fid_items])
        fake_local = np.stack([local_crop(i.output, i.input_mask, size) for i in fid_items])
        local = frechet_distance(feature_extractor(real_local), feature_extractor(fake_local))
        real_global = np.stack([_as_numpy(i.x0) for i in fid_items])
        fake_global = np.stack([_as_numpy(i.output) for i in fid_items])
        full = frechet_distance(feature_extractor(real_global), feature_extractor(fake_global))
        aggregate.update(
            {"local_fid": local.value, "local_fid_jitter": local.jitter, "fid": full.value, "fid_jitter": full.jitter}
        )
    else:
        logging.warning("Fewer than 2 samples, skipping FID")
    if probe is not None:
        aggregate["probe_heldout_accuracy"] = probe.accuracy

    config = {"eval": asdict(cfg), "num_items": len(items)}
    return EvalReport(records=records, aggregate=aggregate, config=config)
