import numpy as np
import torch
from numpy.testing import assert_allclose
from PIL import Image

from maskfill.utilities import (
    config_hash,
    from_uint8,
    hstack_strip,
    load_image,
    load_mask,
    save_image,
    save_mask,
    save_soft_mask,
    save_strip,
    seed_everything,
    to_uint8,
)


def test_uint8_conversion():
    image = np.array([[[-1.0, 0.0, 1.0]], [[-2.0, 0.5, 3.0]], [[0.0, 0.0, 0.0]]])
    data = to_uint8(image)
    assert data.shape == (1, 3, 3)
    assert data.dtype == np.uint8
    # out of range values are clipped
    assert data[0, :, 1].tolist() == [0, 191, 255]
    assert_allclose(from_uint8(data)[0], [[-1.0, 1 / 255, 1.0]], atol=1e-6)


def test_uint8_round_trip_error():
    rng = np.random.default_rng(0)
    image = rng.uniform(-1, 1, size=(3, 8, 8))
    assert np.abs(from_uint8(to_uint8(image)) - image).max() <= 1 / 255 + 1e-6


def test_image_and_mask_files(tmp_path):
    rng = np.random.default_rng(0)
    image = from_uint8(rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8))
    save_image(image, tmp_path / "sub" / "image.png")
    assert np.array_equal(load_image(tmp_path / "sub" / "image.png"), image)

    mask = rng.random((8, 8)) < 0.5
    save_mask(mask, tmp_path / "mask.png")
    assert np.array_equal(load_mask(tmp_path / "mask.png"), mask)
    with Image.open(tmp_path / "mask.png") as img:
        assert img.mode == "L"
        assert set(np.unique(np.asarray(img)).tolist()) <= {0, 255}

    save_soft_mask(np.full((4, 4), 0.5), tmp_path / "soft.png")
    with Image.open(tmp_path / "soft.png") as img:
        assert np.all(np.asarray(img) == 128)


def test_strips(tmp_path):
    tiles = [np.zeros((4, 3), dtype=np.uint8), np.full((4, 3), 255, dtype=np.uint8)]
    strip = hstack_strip(tiles, pad=2)
    assert strip.shape == (4, 8)
    assert np.all(strip[:, 3:5] == 128)
    save_strip(tiles, tmp_path / "strip.png")
    with Image.open(tmp_path / "strip.png") as img:
        assert img.size == (7, 4)


def test_config_hash():
    a = config_hash({"train": {"seed": 1, "lr": 0.1}, "steps": (1, 2)})
    b = config_hash({"steps": [1, 2], "train": {"lr": 0.1, "seed": 1}})
    assert a == b
    assert len(a) == 64
    assert config_hash({"train": {"seed": 2}}) != config_hash({"train": {"seed": 1}})


def test_seed_everything():
    seed_everything(3)
    a = (np.random.rand(), torch.rand(1))
    seed_everything(3)
    b = (np.random.rand(), torch.rand(1))
    assert a[0] == b[0]
    assert torch.equal(a[1], b[1])
