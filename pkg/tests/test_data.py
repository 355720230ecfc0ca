"""Synthetic blobs and the EATD dataset container."""

import struct

import numpy as np
import pytest

from eatformer.data import (
    DATA_MAGIC,
    ImageDataset,
    decode_dataset,
    encode_dataset,
    load_dataset,
    pixels_to_float,
    save_dataset,
    synthetic_blobs,
)
from eatformer.errors import DataError


class TestSyntheticBlobs:
    def test_shape_and_balance(self):
        ds = synthetic_blobs()
        assert ds.images.shape == (200, 3, 32, 32) and ds.images.dtype == np.uint8
        assert np.bincount(ds.labels).tolist() == [20] * 10

    def test_seeded(self):
        a, b, c = synthetic_blobs(seed=4), synthetic_blobs(seed=4), synthetic_blobs(seed=5)
        np.testing.assert_array_equal(a.images, b.images)
        assert not np.array_equal(a.images, c.images)

    def test_class_means_separate(self):
        ds = synthetic_blobs(400)
        means = np.stack([ds.images[ds.labels == c].mean(axis=0).ravel() for c in range(10)])
        gaps = np.linalg.norm(means[:, None] - means[None], axis=-1)
        assert gaps[~np.eye(10, dtype=bool)].min() > 100.0

    def test_float_range(self):
        x = pixels_to_float(np.array([0, 255], dtype=np.uint8))
        np.testing.assert_array_equal(x, [-1.0, 1.0])


class TestContainer:
    def test_roundtrip(self, tmp_path):
        ds = synthetic_blobs(30, 5, 33, seed=2)
        save_dataset(ds, tmp_path / "d.eatd")
        back = load_dataset(tmp_path / "d.eatd")
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.labels, ds.labels)

    def test_layout(self):
        ds = ImageDataset(np.arange(12, dtype=np.uint8).reshape(2, 1, 2, 3), [7, 300])
        raw = encode_dataset(ds)
        assert raw[:4] == DATA_MAGIC
        assert struct.unpack_from("<II3H", raw, 4) == (1, 2, 1, 2, 3)
        assert raw[18:26] == struct.pack("<H", 7) + bytes(range(6))
        assert raw[26:28] == struct.pack("<H", 300) and len(raw) == 18 + 2 * 8

    def test_empty(self):
        ds = ImageDataset(np.zeros((0, 3, 4, 4), np.uint8), np.zeros(0, np.int64))
        assert len(decode_dataset(encode_dataset(ds))) == 0

    @pytest.mark.parametrize("mangle", [
        lambda b: b[:10],
        lambda b: b[:-1],
        lambda b: b + b"\0",
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + struct.pack("<I", 2) + b[8:],
    ])
    def test_corrupt(self, mangle):
        raw = encode_dataset(synthetic_blobs(4, 2, 8))
        with pytest.raises(DataError):
            decode_dataset(mangle(raw))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="cannot read"):
            load_dataset(tmp_path / "nope.eatd")

    @pytest.mark.parametrize("images,labels", [
        (np.zeros((2, 3, 4, 4)), [0, 1]),
        (np.zeros((2, 3, 4), np.uint8), [0, 1]),
        (np.zeros((2, 3, 4, 4), np.uint8), [0]),
        (np.zeros((1, 3, 4, 4), np.uint8), [-1]),
        (np.zeros((1, 3, 4, 4), np.uint8), [70_000]),
    ])
    def test_invalid_dataset(self, images, labels):
        with pytest.raises(DataError):
            ImageDataset(images, labels)
