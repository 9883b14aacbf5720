import hashlib
import json
import logging
import random
import sys
from pathlib import Path
from typing import Any, Union

import numpy as np
import numpy.typing as npt
import torch
from PIL import Image

PathLike = Union[str, Path]


def setup_logging(log_file: PathLike = None) -> None:
    """Sets up logging output.

    Parameters
    ----------
    log_file: PathLike
        Setup path to log file.
    """
    # create handlers list
    handlers = list()

    # create file write handler if log file specified
    if log_file:
        # get log file path
        log_file_path = Path(log_file).resolve()

        # create path to log if needed
        log_file_path.parent.mkdir(parents=True, exist_ok=True)

        # append to handlers
        handlers.append(logging.FileHandler(str(log_file_path), mode="w"))  # will overwrite logs if they exist at path

    # add stdout streaming to handlers
    handlers.append(logging.StreamHandler(sys.stdout))

    # setup log output config, force so a second call (e.g. run dir known later) takes effect
    logging.basicConfig(
        level=logging.INFO, format="[%(asctime)s] %(levelname)s: %(message)s", handlers=handlers, force=True
    )


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch global generators.

    Library code draws from explicit generators; this only covers third party code
    (e.g. torch weight initialization) that uses the global state.
    """
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def config_hash(config: Any) -> str:
    """SHA-256 of the canonical JSON encoding of a (nested) plain config dict

    Parameters
    ----------
    config : Any
        JSON serializable object (tuples are encoded as lists)

    Returns
    -------
    str
        hex digest
    """
    payload = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def to_uint8(image: npt.NDArray) -> npt.NDArray[np.uint8]:
    """Convert a channels-first image in [-1, 1] to a channels-last uint8 array

    Parameters
    ----------
    image : npt.NDArray
        (C, H, W) array, values nominally in [-1, 1]

    Returns
    -------
    npt.NDArray[np.uint8]
        (H, W, C) array in [0, 255]
    """
    data = np.clip((np.asarray(image, dtype=np.float64) + 1.0) * 127.5, 0, 255)
    return np.round(data).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(data: npt.NDArray[np.uint8]) -> npt.NDArray[np.float32]:
    """Inverse of `to_uint8`: (H, W, C) uint8 -> (C, H, W) float32 in [-1, 1]"""
    return (np.asarray(data, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def save_image(image: npt.NDArray, path: PathLike) -> None:
    """Save a channels-first [-1, 1] image as an 8-bit RGB png"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(str(path))


def load_image(path: PathLike) -> npt.NDArray[np.float32]:
    """Load an 8-bit RGB image file as a channels-first [-1, 1] float32 array"""
    with Image.open(str(path)) as img:
        return from_uint8(np.asarray(img.convert("RGB")))


def save_mask(mask: npt.NDArray, path: PathLike) -> None:
    """Save a binary mask as a single channel 8-bit png with values 0/255"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    data = np.asarray(mask).astype(bool).astype(np.uint8) * 255
    Image.fromarray(data, mode="L").save(str(path))


def save_soft_mask(prob: npt.NDArray, path: PathLike) -> None:
    """Save a soft mask in [0, 1] as a single channel 8-bit png"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    data = np.round(np.clip(np.asarray(prob, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(str(path))


def load_mask(path: PathLike) -> npt.NDArray[np.bool_]:
    """Load a single channel mask image; any value above 127 is foreground"""
    with Image.open(str(path)) as img:
        return np.asarray(img.convert("L")) > 127


def hstack_strip(tiles: list, pad: int = 1) -> npt.NDArray[np.uint8]:
    """Lay out 2-D uint8 tiles left to right with a gray separator

    Parameters
    ----------
    tiles : list
        list of (H, W) uint8 arrays of identical shape
    pad : int, optional
        separator width in pixels, by default 1

    Returns
    -------
    npt.NDArray[np.uint8]
        strip image
    """
    height = tiles[0].shape[0]
    separator = np.full((height, pad), 128, dtype=np.uint8)
    parts = []
    for n, tile in enumerate(tiles):
        if n > 0:
            parts.append(separator)
        parts.append(tile)
    return np.concatenate(parts, axis=1)


def save_strip(tiles: list, path: PathLike, pad: int = 1) -> None:
    """Save 2-D uint8 tiles as one single channel strip image"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(hstack_strip(tiles, pad), mode="L").save(str(path))
