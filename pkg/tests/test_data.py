import hashlib

import numpy as np
import pytest

from crqat.data import (
    Dataset,
    load_cifar10,
    load_dataset,
    make_synthetic,
    make_synthetic_pair,
    normalize_images,
    sample_calibration,
    save_dataset,
    split_labeled,
)
from crqat.errors import ConfigError, DataFormatError, UsageError


def write_cifar_batch(path, n, seed):
    rng = np.random.default_rng(seed)
    records = np.empty((n, 3073), dtype=np.uint8)
    records[:, 0] = rng.integers(0, 10, size=n)
    records[:, 1:] = rng.integers(0, 256, size=(n, 3072))
    path.write_bytes(records.tobytes())
    return records


class TestSynthetic:
    def test_deterministic_by_seed(self):
        a = make_synthetic(50, 10, seed=3)
        b = make_synthetic(50, 10, seed=3)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_different_seed_differs(self):
        a = make_synthetic(50, 10, seed=3)
        b = make_synthetic(50, 10, seed=4)
        assert not np.array_equal(a.images, b.images)

    def test_class_histogram_balanced_within_one(self):
        ds = make_synthetic(103, 10, seed=0)
        counts = np.bincount(ds.labels, minlength=10)
        assert counts.max() - counts.min() <= 1

    def test_value_range_and_shape(self):
        ds = make_synthetic(20, 10, seed=1)
        assert ds.images.shape == (20, 3, 32, 32)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_pair_shares_normalization(self):
        train, test = make_synthetic_pair(30, 10, seed=0)
        np.testing.assert_array_equal(train.channel_mean, test.channel_mean)
        assert test.split == "test"

    def test_images_read_only(self):
        ds = make_synthetic(5, 10, seed=0)
        with pytest.raises(ValueError):
            ds.images[0, 0, 0, 0] = 0.5


class TestCifarLoader:
    def test_label_and_scaling(self, tmp_path):
        for name in [f"data_batch_{i}.bin" for i in range(1, 6)]:
            write_cifar_batch(tmp_path / name, 8, seed=hash(name) % 100)
        rec = write_cifar_batch(tmp_path / "test_batch.bin", 4, seed=77)
        train, test = load_cifar10(tmp_path)
        assert len(train) == 40 and len(test) == 4
        assert test.labels[0] == rec[0, 0]
        # R plane first, row-major: byte k of image area is pixel (k//32, k%32)
        assert test.images[0, 0, 0, 0] == pytest.approx(rec[0, 1] / 255.0)
        assert test.images[0, 2, 31, 31] == pytest.approx(rec[0, 3072] / 255.0)
        byte255 = np.argwhere(rec[0, 1:] == 255)
        if len(byte255):
            flat = test.images[0].reshape(-1)
            assert flat[byte255[0, 0]] == 1.0

    def test_reload_bitwise_identical(self, tmp_path):
        for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
            write_cifar_batch(tmp_path / name, 6, seed=len(name))
        t1, _ = load_cifar10(tmp_path)
        t2, _ = load_cifar10(tmp_path)
        digest1 = hashlib.sha256(t1.images.tobytes()).hexdigest()
        digest2 = hashlib.sha256(t2.images.tobytes()).hexdigest()
        assert digest1 == digest2

    def test_truncated_file_reports_offset(self, tmp_path):
        for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
            write_cifar_batch(tmp_path / name, 4, seed=1)
        path = tmp_path / "data_batch_3.bin"
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(DataFormatError, match="offset"):
            load_cifar10(tmp_path)

    def test_missing_file_named(self, tmp_path):
        with pytest.raises(DataFormatError, match="data_batch_1.bin"):
            load_cifar10(tmp_path)


class TestCalibrationSampling:
    def test_full_sample_is_permutation(self):
        ds = make_synthetic(40, 10, seed=0)
        calib = sample_calibration(ds, 40, seed=1)
        assert sorted(calib.info["indices"].tolist()) == list(range(40))

    def test_hundred_unique_indices(self):
        ds = make_synthetic(500, 10, seed=0)
        calib = sample_calibration(ds, 100, seed=1)
        assert len(calib) == 100
        assert len(set(calib.info["indices"].tolist())) == 100

    def test_disjointness_oracle(self):
        ds = make_synthetic(200, 10, seed=0)
        calib = sample_calibration(ds, 50, seed=1)
        chosen = set(calib.info["indices"].tolist())
        held_out = set(range(200)) - chosen
        assert chosen.isdisjoint(held_out)
        assert len(chosen | held_out) == 200

    def test_oversample_rejected(self):
        ds = make_synthetic(10, 10, seed=0)
        with pytest.raises(UsageError):
            sample_calibration(ds, 11, seed=0)


class TestSplitLabeled:
    def test_full_fraction_keeps_everything(self):
        ds = make_synthetic(60, 10, seed=0)
        labeled, pool = split_labeled(ds, 1.0, seed=0)
        assert len(labeled) == 60 and len(pool) == 0
        np.testing.assert_array_equal(np.sort(labeled.info["indices"]),
                                      np.arange(60))

    def test_stratified_counts_within_one(self):
        ds = make_synthetic(500, 10, seed=0)
        labeled, pool = split_labeled(ds, 0.2, seed=0)
        counts = np.bincount(labeled.labels, minlength=10)
        assert counts.max() - counts.min() <= 1
        assert len(labeled) + len(pool) == 500

    def test_partition_set_oracle(self):
        ds = make_synthetic(100, 10, seed=0)
        labeled, pool = split_labeled(ds, 0.3, seed=0)
        a = set(labeled.info["indices"].tolist())
        b = set(pool.info["indices"].tolist())
        assert a.isdisjoint(b)
        assert a | b == set(range(100))

    def test_pool_has_no_labels(self):
        ds = make_synthetic(50, 10, seed=0)
        _, pool = split_labeled(ds, 0.5, seed=0)
        assert pool.labels is None

    def test_fraction_validated(self):
        ds = make_synthetic(10, 10, seed=0)
        with pytest.raises(ConfigError):
            split_labeled(ds, 0.0, seed=0)


class TestCache:
    def test_roundtrip(self, tmp_path):
        ds = make_synthetic(25, 10, seed=5)
        save_dataset(ds, tmp_path / "cache.bin")
        back = load_dataset(tmp_path / "cache.bin")
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.num_classes == 10

    def test_header_layout(self, tmp_path):
        ds = make_synthetic(4, 10, seed=5)
        path = tmp_path / "cache.bin"
        save_dataset(ds, path)
        raw = path.read_bytes()
        assert raw[:4] == b"CRDS"
        version, n, classes = np.frombuffer(raw[4:16], dtype=np.uint32)
        assert (version, n, classes) == (1, 4, 10)
        assert len(raw) == 16 + 4 * 3 * 32 * 32 * 4 + 4

    def test_truncation_detected(self, tmp_path):
        ds = make_synthetic(4, 10, seed=5)
        path = tmp_path / "cache.bin"
        save_dataset(ds, path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(DataFormatError, match="truncation"):
            load_dataset(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "cache.bin"
        path.write_bytes(b"XXXX" + b"\x00" * 20)
        with pytest.raises(DataFormatError, match="magic"):
            load_dataset(path)


def test_normalize_images_constants():
    ds = make_synthetic(30, 10, seed=0)
    out = normalize_images(ds.images, ds.channel_mean, ds.channel_std)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-4)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 1.0, atol=1e-3)
