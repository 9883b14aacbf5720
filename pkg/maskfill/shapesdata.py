"""Procedural shapes dataset: one colored geometric object on a smooth textured background.

Layout of a dataset directory::

    images/NNNNN.png    8-bit RGB image
    masks/NNNNN.png     8-bit single channel instance mask (0/255)
    manifest.jsonl      one JSON record per sample (id, label, caption, tokens, metadata)
    spec.yaml           generator configuration
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
import yaml
from scipy.ndimage import gaussian_filter

from .concurrency import run_executor
from .config import to_plain
from .errors import ConfigError, DatasetError
from .maskops import LadderConfig, mask_ladder
from .utilities import PathLike, load_image, load_mask, save_image, save_mask

SHAPE_CLASSES = ("circle", "square", "triangle", "cross", "ring")

COLOR_TABLE: Dict[str, Tuple[float, float, float]] = {
    "red": (0.86, 0.12, 0.12),
    "green": (0.13, 0.70, 0.20),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.85, 0.10),
    "purple": (0.60, 0.18, 0.75),
    "white": (0.97, 0.97, 0.97),
}

# distinct stream tags for the per-sample random generators
SPLIT_STREAMS = {"train": 0, "heldout": 1}


@dataclass(frozen=True)
class DatasetSpec:
    resolution: int = 32
    classes: Tuple[str, ...] = SHAPE_CLASSES
    colors: Tuple[str, ...] = tuple(COLOR_TABLE)
    size_range: Tuple[int, int] = (10, 20)
    margin: int = 2
    texture_sigma: float = 4.0
    texture_strength: float = 0.15
    num_samples: int = 5000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "colors", tuple(self.colors))
        object.__setattr__(self, "size_range", tuple(int(v) for v in self.size_range))
        unknown_classes = set(self.classes) - set(SHAPE_CLASSES)
        if unknown_classes or not self.classes:
            raise ConfigError(f"dataset.classes: must be a non-empty subset of {SHAPE_CLASSES}")
        unknown_colors = set(self.colors) - set(COLOR_TABLE)
        if unknown_colors or not self.colors:
            raise ConfigError(f"dataset.colors: must be a non-empty subset of {tuple(COLOR_TABLE)}")
        low, high = self.size_range
        if not 4 <= low <= high:
            raise ConfigError(f"dataset.size_range: need 4 <= min <= max, got {self.size_range}")
        if high + 2 * self.margin > self.resolution:
            raise ConfigError(
                f"dataset.size_range: max size {high} with margin {self.margin} does not fit "
                f"resolution {self.resolution}"
            )
        if self.margin < 2:
            raise ConfigError(f"dataset.margin: must be >= 2, got {self.margin}")
        if self.num_samples < 1:
            raise ConfigError(f"dataset.num_samples: must be >= 1, got {self.num_samples}")


class Vocabulary:
    """Closed token table shared by the dataset and the denoiser's condition embedding.

    Token 0 is the null condition, then one token per class label, then one per
    "a <color> <class>" caption.
    """

    NULL_TOKEN = 0

    def __init__(self, classes: Sequence[str], colors: Sequence[str]):
        self.classes = tuple(classes)
        self.colors = tuple(colors)
        self._texts: List[str] = [""] + list(self.classes)
        self._classes: List[Optional[str]] = [None] + list(self.classes)
        self._colors: List[Optional[str]] = [None] * len(self._texts)
        for color in self.colors:
            for cls in self.classes:
                self._texts.append(caption_text(color, cls))
                self._classes.append(cls)
                self._colors.append(color)
        self._index = {text: n for n, text in enumerate(self._texts) if n > 0}

    @classmethod
    def from_spec(cls, spec: DatasetSpec) -> "Vocabulary":
        return cls(spec.classes, spec.colors)

    def __len__(self) -> int:
        return len(self._texts)

    def encode(self, text: str) -> int:
        try:
            return self._index[text.strip().lower()]
        except KeyError:
            raise ValueError(f"prompt: {text!r} is not in the vocabulary") from None

    def decode(self, token: int) -> str:
        return self._texts[token]

    def class_of(self, token: int) -> Optional[str]:
        """Shape class named by a token (None for the null token)"""
        return self._classes[token]

    def color_of(self, token: int) -> Optional[str]:
        """Color named by a caption token (None for class labels and the null token)"""
        return self._colors[token]

    def class_index(self, token: int) -> int:
        cls = self.class_of(token)
        if cls is None:
            raise ValueError("token: the null token names no class")
        return self.classes.index(cls)

    def is_caption(self, token: int) -> bool:
        return token > len(self.classes)


def caption_text(color: str, cls: str) -> str:
    return f"a {color} {cls}"


@dataclass(eq=False)
class TrainingSample:
    image: npt.NDArray[np.float32]  # (3, H, W) in [-1, 1]
    mask: npt.NDArray[np.bool_]  # (H, W)
    label: str
    caption: str
    label_token: int
    caption_token: int
    metadata: dict = field(default_factory=dict)


def sample_rng(seed: int, idx: int, split: str = "train") -> np.random.Generator:
    """Generator keyed on (seed, split, sample id) so samples can be produced in any order"""
    return np.random.default_rng([seed, SPLIT_STREAMS[split], idx])


def rasterize_shape(
    shape: str, center: Tuple[float, float], size: float, resolution: int, angle: float = 0.0
) -> npt.NDArray[np.bool_]:
    """Pixel support of a shape, evaluated at pixel centers with strict inequalities

    Parameters
    ----------
    shape : str
        one of SHAPE_CLASSES
    center : Tuple[float, float]
        (row, col) center in pixel units
    size : float
        side of the shape's bounding square
    resolution : int
        image size
    angle : float, optional
        rotation in radians for triangle/cross, by default 0.0

    Returns
    -------
    npt.NDArray[np.bool_]
        (resolution, resolution) mask
    """
    rows, cols = np.mgrid[0:resolution, 0:resolution].astype(np.float64) + 0.5
    dy = rows - center[0]
    dx = cols - center[1]
    half = size / 2.0
    if shape == "circle":
        return dx**2 + dy**2 < half**2
    if shape == "ring":
        dist2 = dx**2 + dy**2
        return (dist2 < half**2) & (dist2 >= (0.5 * half) ** 2)
    if shape == "square":
        return (np.abs(dx) < half) & (np.abs(dy) < half)
    if shape == "cross":
        arm = size / 6.0
        inside = (np.abs(dx) < half) & (np.abs(dy) < half)
        return inside & ((np.abs(dx) < arm) | (np.abs(dy) < arm))
    if shape == "triangle":
        # upward triangle inscribed in the bounding square, rotated by a multiple of 90 degrees
        quarter = int(round(angle / (np.pi / 2))) % 4
        u, v = dx, dy
        for _ in range(quarter):
            u, v = -v, u
        inside = (v < half) & (v > -half)
        return inside & (np.abs(u) < (v + half) / 2.0)
    raise ValueError(f"shape: unknown shape {shape!r}")


def render_background(rng: np.random.Generator, resolution: int, sigma: float, strength: float) -> npt.NDArray:
    """Smooth gradient between two random colors plus low-frequency noise, (3, H, W) in [0, 1]"""
    start = rng.uniform(0.1, 0.9, size=3)
    stop = rng.uniform(0.1, 0.9, size=3)
    theta = rng.uniform(0, 2 * np.pi)
    rows, cols = np.mgrid[0:resolution, 0:resolution].astype(np.float64) / max(resolution - 1, 1)
    ramp = np.cos(theta) * cols + np.sin(theta) * rows
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-8)
    image = start[:, None, None] + (stop - start)[:, None, None] * ramp[None]
    noise = rng.standard_normal((3, resolution, resolution))
    noise = np.stack([gaussian_filter(channel, sigma, mode="wrap") for channel in noise])
    noise /= max(np.abs(noise).max(), 1e-8)
    return np.clip(image + strength * noise, 0.0, 1.0)


def generate_sample(spec: DatasetSpec, rng: np.random.Generator, vocab: Optional[Vocabulary] = None) -> TrainingSample:
    """Draw one image/mask/caption triple

    Parameters
    ----------
    spec : DatasetSpec
        generator configuration
    rng : np.random.Generator
        random generator; the sample is a deterministic function of its state
    vocab : Vocabulary, optional
        token table, built from spec if not given

    Returns
    -------
    TrainingSample
        the sample
    """
    vocab = vocab if vocab is not None else Vocabulary.from_spec(spec)
    res = spec.resolution
    label = spec.classes[rng.integers(len(spec.classes))]
    color = spec.colors[rng.integers(len(spec.colors))]
    size = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
    angle = float(rng.integers(4)) * np.pi / 2

    # center so that the bounding square keeps the margin on every side
    low = spec.margin + size / 2.0
    high = res - spec.margin - size / 2.0
    center = (float(rng.uniform(low, high)), float(rng.uniform(low, high)))

    background = render_background(rng, res, spec.texture_sigma, spec.texture_strength)
    mask = rasterize_shape(label, center, size, res, angle)

    # flat color with a slight shading so objects are not piecewise constant
    fill = np.asarray(COLOR_TABLE[color])[:, None, None]
    shade = 1.0 + 0.08 * rng.standard_normal() * (np.arange(res)[None, :, None] - center[0]) / res
    obj = np.clip(fill * shade, 0.0, 1.0)
    image = np.where(mask[None], obj, background)

    caption = caption_text(color, label)
    return TrainingSample(
        image=(image * 2.0 - 1.0).astype(np.float32),
        mask=mask,
        label=label,
        caption=caption,
        label_token=vocab.encode(label),
        caption_token=vocab.encode(caption),
        metadata={"center": list(center), "size": size, "color": color, "angle": angle},
    )


def _generate_and_write(spec: DatasetSpec, idx: int, split: str, path: Path, vocab: Vocabulary) -> dict:
    sample = generate_sample(spec, sample_rng(spec.seed, idx, split), vocab)
    name = f"{idx:05d}.png"
    save_image(sample.image, path / "images" / name)
    save_mask(sample.mask, path / "masks" / name)
    return {
        "id": idx,
        "label": sample.label,
        "caption": sample.caption,
        "label_token": sample.label_token,
        "caption_token": sample.caption_token,
        "metadata": sample.metadata,
    }


def write_dataset(spec: DatasetSpec, path: PathLike, split: str = "train", n_workers: int = 1) -> Path:
    """Generate `spec.num_samples` samples and write them to a dataset directory

    Parameters
    ----------
    spec : DatasetSpec
        generator configuration
    path : PathLike
        output directory
    split : str, optional
        "train" or "heldout", selects an independent random stream, by default "train"
    n_workers : int, optional
        number of worker threads, by default 1

    Returns
    -------
    Path
        the dataset directory
    """
    if split not in SPLIT_STREAMS:
        raise ConfigError(f"split: must be one of {tuple(SPLIT_STREAMS)}, got {split!r}")
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    (path / "masks").mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary.from_spec(spec)

    logging.info(f"Writing {spec.num_samples} {split} samples to {path}...")
    records = run_executor(
        n_workers,
        "thread",
        _generate_and_write,
        ((spec, idx, split, path, vocab) for idx in range(spec.num_samples)),
    )

    with open(path / "manifest.jsonl", "w") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    spec_record = to_plain(spec)
    spec_record["split"] = split
    with open(path / "spec.yaml", "w") as f:
        yaml.safe_dump(spec_record, f, sort_keys=False)
    logging.info("Done.")
    return path


def read_spec(path: PathLike) -> DatasetSpec:
    """Read the generator configuration echoed into a dataset directory"""
    spec_path = Path(path) / "spec.yaml"
    if not spec_path.exists():
        raise DatasetError(f"missing dataset spec file: {spec_path}")
    with open(spec_path, "r") as f:
        data = yaml.safe_load(f)
    data.pop("split", None)
    return DatasetSpec(**data)


def iter_dataset(path: PathLike) -> Iterator[TrainingSample]:
    """Stream the samples of a dataset directory in manifest order"""
    path = Path(path)
    manifest = path / "manifest.jsonl"
    if not manifest.exists():
        raise DatasetError(f"missing dataset manifest: {manifest}")
    with open(manifest, "r") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{manifest}:{line_number}: malformed record ({e.msg})") from e
            idx = record.get("id")
            name = f"{idx:05d}.png" if isinstance(idx, int) else None
            if name is None:
                raise DatasetError(f"{manifest}:{line_number}: record has no integer id")
            image_path = path / "images" / name
            mask_path = path / "masks" / name
            for p in (image_path, mask_path):
                if not p.exists():
                    raise DatasetError(f"sample {idx}: missing file {p}")
            image = load_image(image_path)
            mask = load_mask(mask_path)
            if image.shape[1:] != mask.shape:
                raise DatasetError(f"sample {idx}: image shape {image.shape[1:]} does not match mask {mask.shape}")
            if not mask.any():
                raise DatasetError(f"sample {idx}: empty instance mask")
            yield TrainingSample(
                image=image,
                mask=mask,
                label=record["label"],
                caption=record["caption"],
                label_token=int(record["label_token"]),
                caption_token=int(record["caption_token"]),
                metadata=record.get("metadata", {}),
            )


def read_dataset(path: PathLike) -> List[TrainingSample]:
    """Read a whole dataset directory into memory"""
    return list(iter_dataset(path))


class ShapesDataset:
    """In-memory array view of a list of samples, used by the trainer and the evaluation tools."""

    def __init__(self, samples: Sequence[TrainingSample], vocab: Vocabulary):
        if len(samples) == 0:
            raise DatasetError("dataset is empty")
        self.samples = list(samples)
        self.vocab = vocab
        self.images = np.stack([s.image for s in self.samples]).astype(np.float32)
        self.masks = np.stack([s.mask for s in self.samples])
        self.label_tokens = np.array([s.label_token for s in self.samples], dtype=np.int64)
        self.caption_tokens = np.array([s.caption_token for s in self.samples], dtype=np.int64)
        self._ladders: Dict[Tuple[int, int, LadderConfig], npt.NDArray[np.bool_]] = {}

    @classmethod
    def from_directory(cls, path: PathLike) -> "ShapesDataset":
        spec = read_spec(path)
        return cls(read_dataset(path), Vocabulary.from_spec(spec))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def resolution(self) -> int:
        return int(self.images.shape[-1])

    def precision_mask(self, idx: int, s: int, ladder: LadderConfig) -> npt.NDArray[np.bool_]:
        """Cached level-s mask of sample idx (ladders are deterministic per sample)"""
        key = (idx, s, ladder)
        if key not in self._ladders:
            for level, m in enumerate(mask_ladder(self.masks[idx], ladder)):
                self._ladders[(idx, level, ladder)] = m
        return self._ladders[key]
