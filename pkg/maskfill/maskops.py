from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
import numpy.typing as npt
from scipy.ndimage import correlate1d
from skimage.measure import regionprops  # type: ignore

from .errors import ConfigError

# ladder defaults at the reference resolution
REFERENCE_RESOLUTION = 32
DEFAULT_KERNEL_SIZES = (9, 17, 33)
DEFAULT_SIGMAS = (3.0, 6.0, 12.0)


def as_binary(m: npt.ArrayLike, name: str = "m") -> npt.NDArray[np.bool_]:
    """Check that a mask holds only 0/1 values and return it as a bool array

    Parameters
    ----------
    m : npt.ArrayLike
        mask candidate
    name : str, optional
        argument name used in the error message, by default "m"

    Returns
    -------
    npt.NDArray[np.bool_]
        boolean mask
    """
    data = np.asarray(m)
    if data.dtype != np.bool_:
        if not np.all((data == 0) | (data == 1)):
            raise ValueError(f"{name}: mask values must be exactly 0 or 1")
        data = data.astype(np.bool_)
    return data


@dataclass(frozen=True)
class LadderConfig:
    """Fine to coarse mask ladder parameters.

    Level 0 is the exact mask, level S its bounding box, levels 1..S-1 use
    `kernel_sizes[s - 1]` / `sigmas[s - 1]`. Kernels and sigmas are given for images of
    `resolution` pixels; `scaled_to` rescales them for other image sizes.
    """

    S: int = 4
    kernel_sizes: Tuple[int, ...] = DEFAULT_KERNEL_SIZES
    sigmas: Tuple[float, ...] = DEFAULT_SIGMAS
    binarize_threshold: float = 0.05
    resolution: int = REFERENCE_RESOLUTION

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        if self.S < 1:
            raise ConfigError(f"ladder.S: must be >= 1, got {self.S}")
        if len(self.kernel_sizes) != self.S - 1:
            raise ConfigError(f"ladder.kernel_sizes: expected {self.S - 1} entries, got {len(self.kernel_sizes)}")
        if len(self.sigmas) != self.S - 1:
            raise ConfigError(f"ladder.sigmas: expected {self.S - 1} entries, got {len(self.sigmas)}")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ConfigError(f"ladder.kernel_sizes: must be odd and >= 1, got {self.kernel_sizes}")
        if any(s <= 0 for s in self.sigmas):
            raise ConfigError(f"ladder.sigmas: must be positive, got {self.sigmas}")
        if any(a >= b for a, b in zip(self.kernel_sizes, self.kernel_sizes[1:])):
            raise ConfigError(f"ladder.kernel_sizes: must be strictly increasing, got {self.kernel_sizes}")
        if any(a >= b for a, b in zip(self.sigmas, self.sigmas[1:])):
            raise ConfigError(f"ladder.sigmas: must be strictly increasing, got {self.sigmas}")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ConfigError(f"ladder.binarize_threshold: must lie in (0, 1), got {self.binarize_threshold}")
        if self.resolution < 1:
            raise ConfigError(f"ladder.resolution: must be >= 1, got {self.resolution}")

    def scaled_to(self, resolution: int) -> "LadderConfig":
        """The same ladder for images of another size

        Kernel radii and sigmas scale proportionally with the image size; kernels stay odd
        and strictly increasing.

        Parameters
        ----------
        resolution : int
            target image size in pixels

        Returns
        -------
        LadderConfig
            rescaled configuration, self when the resolution already matches
        """
        if resolution == self.resolution:
            return self
        if resolution < 1:
            raise ValueError(f"resolution: must be >= 1, got {resolution}")
        scale = resolution / self.resolution
        kernel_sizes: List[int] = []
        for k in self.kernel_sizes:
            scaled = 2 * int(np.floor((k - 1) / 2 * scale + 0.5)) + 1
            if kernel_sizes and scaled <= kernel_sizes[-1]:
                scaled = kernel_sizes[-1] + 2
            kernel_sizes.append(scaled)
        return replace(
            self,
            kernel_sizes=tuple(kernel_sizes),
            sigmas=tuple(s * scale for s in self.sigmas),
            resolution=int(resolution),
        )

    @classmethod
    def for_resolution(cls, resolution: int, **kwargs) -> "LadderConfig":
        """Default ladder scaled to an image size"""
        return cls(**kwargs).scaled_to(resolution)


@dataclass(frozen=True, eq=False)
class PrecisionMask:
    """A (possibly coarsened) mask together with its precision level."""

    data: npt.NDArray[np.bool_]
    s: int
    source: Optional[npt.NDArray[np.bool_]] = field(default=None, repr=False)


def gaussian_kernel1d(k: int, sigma: float) -> npt.NDArray[np.float64]:
    """Normalized 1-D Gaussian of odd length k"""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"k: kernel size must be odd and >= 1, got {k}")
    if sigma <= 0:
        raise ValueError(f"sigma: must be positive, got {sigma}")
    radius = (k - 1) // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-(x**2) / (2.0 * sigma**2))
    return weights / weights.sum()


def gaussian_blur(m: npt.ArrayLike, k: int, sigma: float) -> npt.NDArray[np.float64]:
    """Separable Gaussian blur of a mask with a normalized k x k kernel

    Borders are reflect padded, so a constant mask stays constant.

    Parameters
    ----------
    m : npt.ArrayLike
        (H, W) binary mask
    k : int
        odd kernel size
    sigma : float
        standard deviation of the Gaussian

    Returns
    -------
    npt.NDArray[np.float64]
        soft mask in [0, 1]
    """
    weights = gaussian_kernel1d(k, sigma)
    data = as_binary(m).astype(np.float64)
    if k == 1:
        return data
    blurred = correlate1d(data, weights, axis=0, mode="reflect")
    blurred = correlate1d(blurred, weights, axis=1, mode="reflect")
    return np.clip(blurred, 0.0, 1.0)


def binarize(soft: npt.ArrayLike, theta: float) -> npt.NDArray[np.bool_]:
    """1 where soft > theta, else 0"""
    return np.asarray(soft) > theta


def bounding_box(m: npt.ArrayLike) -> Tuple[int, int, int, int]:
    """Tight bounding box of a mask's support as (min_row, min_col, max_row, max_col), max exclusive

    Parameters
    ----------
    m : npt.ArrayLike
        (H, W) binary mask

    Returns
    -------
    Tuple[int, int, int, int]
        box corners
    """
    data = as_binary(m)
    if not data.any():
        raise ValueError("m: bounding box of an empty mask is undefined")
    props = regionprops(data.astype(np.uint8))
    return tuple(int(v) for v in props[0].bbox)  # type: ignore


def bbox_mask(m: npt.ArrayLike) -> npt.NDArray[np.bool_]:
    """Filled axis-aligned tight bounding rectangle of a mask's support"""
    data = as_binary(m)
    r0, c0, r1, c1 = bounding_box(data)
    box = np.zeros_like(data, dtype=np.bool_)
    box[r0:r1, c0:c1] = True
    return box


def mask_ladder(m: npt.ArrayLike, cfg: LadderConfig) -> List[npt.NDArray[np.bool_]]:
    """All precision levels 0..S of an instance mask.

    Levels 1..S-1 accumulate: m_s = m_{s-1} | binarize(blur(m, k_s, sigma_s)), so the intermediate levels
    are nested. Level S is the bounding box; intermediate levels are not clipped to it.

    Parameters
    ----------
    m : npt.ArrayLike
        non-empty (H, W) instance mask
    cfg : LadderConfig
        ladder parameters

    Returns
    -------
    List[npt.NDArray[np.bool_]]
        S + 1 masks, fine to coarse
    """
    source = as_binary(m)
    if not source.any():
        raise ValueError("m: precision ladder of an empty mask is undefined")
    ladder = [source.copy()]
    for k, sigma in zip(cfg.kernel_sizes, cfg.sigmas):
        coarse = binarize(gaussian_blur(source, k, sigma), cfg.binarize_threshold)
        ladder.append(ladder[-1] | coarse)
    ladder.append(bbox_mask(source))
    return ladder


def precision_mask(m: npt.ArrayLike, s: int, cfg: LadderConfig) -> PrecisionMask:
    """Mask of precision level s derived from an instance mask

    Parameters
    ----------
    m : npt.ArrayLike
        non-empty (H, W) instance mask
    s : int
        precision level in [0, S]
    cfg : LadderConfig
        ladder parameters

    Returns
    -------
    PrecisionMask
        level s mask with its source
    """
    if not 0 <= s <= cfg.S:
        raise ValueError(f"s: precision level must lie in [0, {cfg.S}], got {s}")
    source = as_binary(m)
    if s == 0:
        if not source.any():
            raise ValueError("m: precision mask of an empty mask is undefined")
        return PrecisionMask(source.copy(), 0, source)
    if s == cfg.S:
        return PrecisionMask(bbox_mask(source), s, source)
    return PrecisionMask(mask_ladder(source, cfg)[s], s, source)


def iou(a: npt.ArrayLike, b: npt.ArrayLike) -> float:
    """Intersection over union of two masks; 1.0 when both are empty"""
    a = as_binary(a, "a")
    b = as_binary(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"b: shape {b.shape} does not match a shape {a.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union
