import os
import shutil
import struct
import tempfile
import unittest

import numpy as np

from data_collector import (
    CIFAR10_PIXELS,
    MNIST_IMAGE_MAGIC,
    MNIST_LABEL_MAGIC,
    BadMagicError,
    CountMismatchError,
    DataCollector,
    DatasetError,
    InsufficientSamplesError,
    LabelRangeError,
    RecordLengthError,
    TruncatedFileError,
    VisitCounter,
    load_cifar10_bin,
    load_mnist_idx,
    merge_counters,
    record_visits,
    subset,
    synthetic,
)


def write_mnist_idx(images, labels, images_path, labels_path):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", MNIST_IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", MNIST_LABEL_MAGIC, len(labels)) + labels.tobytes())


def write_cifar10_bin(pixels, labels, path):
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(-1, CIFAR10_PIXELS)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    with open(path, "wb") as f:
        f.write(np.hstack([labels, pixels]).tobytes())


class MnistReaderTests(unittest.TestCase):
    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.images_path = os.path.join(self.temp_dir, "images.idx")
        self.labels_path = os.path.join(self.temp_dir, "labels.idx")
        rng = np.random.default_rng(0)
        self.images = rng.integers(0, 256, size=(12, 4, 3), dtype=np.uint8)
        self.labels = rng.integers(0, 10, size=12, dtype=np.uint8)

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_round_trip_is_bit_exact(self):
        write_mnist_idx(self.images, self.labels, self.images_path, self.labels_path)
        ds = load_mnist_idx(self.images_path, self.labels_path)
        self.assertEqual(len(ds), 12)
        self.assertEqual(ds.dim, 12)
        self.assertEqual(ds.num_classes, 10)
        np.testing.assert_array_equal(np.rint(ds.features * 255).astype(np.uint8), self.images.reshape(12, -1))
        np.testing.assert_array_equal(ds.labels, self.labels)
        np.testing.assert_array_equal(ds.sample_ids, np.arange(12))
        self.assertTrue(((ds.features >= 0) & (ds.features <= 1)).all())

    def test_bad_magic(self):
        write_mnist_idx(self.images, self.labels, self.images_path, self.labels_path)
        with open(self.images_path, "r+b") as f:
            f.write(struct.pack(">I", 0x00000801))
        with self.assertRaises(BadMagicError):
            load_mnist_idx(self.images_path, self.labels_path)

    def test_truncated_images(self):
        write_mnist_idx(self.images, self.labels, self.images_path, self.labels_path)
        with open(self.images_path, "r+b") as f:
            f.truncate(16 + 5 * 12)
        with self.assertRaises(TruncatedFileError):
            load_mnist_idx(self.images_path, self.labels_path)

    def test_truncated_header(self):
        with open(self.images_path, "wb") as f:
            f.write(b"\x00\x00")
        write_mnist_idx(self.images, self.labels, os.path.join(self.temp_dir, "x"), self.labels_path)
        with self.assertRaises(TruncatedFileError):
            load_mnist_idx(self.images_path, self.labels_path)

    def test_count_mismatch(self):
        write_mnist_idx(self.images, self.labels[:11], self.images_path, self.labels_path)
        with self.assertRaises(CountMismatchError):
            load_mnist_idx(self.images_path, self.labels_path)

    def test_label_out_of_range(self):
        labels = self.labels.copy()
        labels[3] = 10
        write_mnist_idx(self.images, labels, self.images_path, self.labels_path)
        with self.assertRaises(LabelRangeError):
            load_mnist_idx(self.images_path, self.labels_path)


class CifarReaderTests(unittest.TestCase):
    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        rng = np.random.default_rng(1)
        self.pixels = rng.integers(0, 256, size=(7, 3072), dtype=np.uint8)
        self.labels = rng.integers(0, 10, size=7, dtype=np.uint8)

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_round_trip_concatenates_batches(self):
        first = os.path.join(self.temp_dir, "data_batch_1.bin")
        second = os.path.join(self.temp_dir, "data_batch_2.bin")
        write_cifar10_bin(self.pixels[:4], self.labels[:4], first)
        write_cifar10_bin(self.pixels[4:], self.labels[4:], second)
        ds = load_cifar10_bin([first, second])
        self.assertEqual(len(ds), 7)
        self.assertEqual(ds.dim, 3072)
        np.testing.assert_array_equal(np.rint(ds.features * 255).astype(np.uint8), self.pixels)
        np.testing.assert_array_equal(ds.labels, self.labels)
        np.testing.assert_array_equal(ds.sample_ids, np.arange(7))

    def test_partial_record(self):
        path = os.path.join(self.temp_dir, "broken.bin")
        write_cifar10_bin(self.pixels[:2], self.labels[:2], path)
        with open(path, "ab") as f:
            f.write(b"\x01\x02\x03")
        with self.assertRaises(RecordLengthError):
            load_cifar10_bin([path])

    def test_label_out_of_range(self):
        path = os.path.join(self.temp_dir, "bad_label.bin")
        labels = self.labels.copy()
        labels[0] = 12
        write_cifar10_bin(self.pixels, labels, path)
        with self.assertRaises(LabelRangeError):
            load_cifar10_bin([path])

    def test_no_batches(self):
        with self.assertRaises(DatasetError):
            load_cifar10_bin([])


class SyntheticTests(unittest.TestCase):
    def test_shape_range_and_balance(self):
        ds = synthetic(400, 6, 4, 3.0, seed=2)
        self.assertEqual(ds.features.shape, (400, 6))
        self.assertAlmostEqual(float(ds.features.min()), 0.0)
        self.assertAlmostEqual(float(ds.features.max()), 1.0)
        np.testing.assert_array_equal(np.bincount(ds.labels), [100, 100, 100, 100])

    def test_seeded(self):
        a = synthetic(50, 3, 2, 2.0, seed=9)
        b = synthetic(50, 3, 2, 2.0, seed=9)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_more_classes_than_dimensions(self):
        ds = synthetic(30, 2, 5, 3.0, seed=0)
        self.assertEqual(ds.num_classes, 5)

    def test_invalid_parameters(self):
        with self.assertRaises(DatasetError):
            synthetic(3, 2, 4, 1.0, seed=0)
        with self.assertRaises(DatasetError):
            synthetic(30, 2, 1, 1.0, seed=0)


class SubsetTests(unittest.TestCase):
    def setUp(self):
        self.ds = synthetic(1000, 5, 4, 3.0, seed=0)

    def test_disjoint_stratified_and_seeded(self):
        train, valid = subset(self.ds, 400, 200, seed=3)
        self.assertEqual((len(train), len(valid)), (400, 200))
        self.assertFalse(set(train.sample_ids) & set(valid.sample_ids))
        np.testing.assert_array_equal(np.bincount(train.labels), [100, 100, 100, 100])
        np.testing.assert_array_equal(np.bincount(valid.labels), [50, 50, 50, 50])
        np.testing.assert_array_equal(train.features, self.ds.features[train.sample_ids])
        self.assertEqual(train.name, "synthetic-train")
        self.assertEqual(valid.name, "synthetic-valid")

        again, _ = subset(self.ds, 400, 200, seed=3)
        np.testing.assert_array_equal(again.sample_ids, train.sample_ids)
        other, _ = subset(self.ds, 400, 200, seed=4)
        self.assertFalse(np.array_equal(other.sample_ids, train.sample_ids))

    def test_uneven_split_keeps_requested_sizes(self):
        train, valid = subset(self.ds, 333, 111, seed=0)
        self.assertEqual((len(train), len(valid)), (333, 111))
        self.assertTrue(np.all(np.abs(np.bincount(train.labels) - 333 / 4) <= 1))

    def test_whole_dataset(self):
        train, valid = subset(self.ds, 700, 300, seed=0)
        self.assertEqual(set(train.sample_ids) | set(valid.sample_ids), set(range(1000)))

    def test_too_many_requested(self):
        with self.assertRaises(InsufficientSamplesError):
            subset(self.ds, 900, 101, seed=0)


class VisitCounterTests(unittest.TestCase):
    def test_record_counts_duplicates(self):
        counter = VisitCounter.zeros(5)
        record_visits(counter, [0, 1, 1, 4])
        record_visits(counter, np.array([1]))
        np.testing.assert_array_equal(counter.counts, [1, 3, 0, 0, 1])
        self.assertEqual(counter.total, 5)

    def test_out_of_range(self):
        with self.assertRaises(ValueError):
            record_visits(VisitCounter.zeros(3), [3])

    def test_merge(self):
        a = VisitCounter(np.array([1, 0, 2]), np.array([10, 11, 12]))
        b = VisitCounter(np.array([0, 5, 1]), np.array([10, 11, 12]))
        merged = merge_counters([a, b])
        np.testing.assert_array_equal(merged.counts, [1, 5, 3])
        np.testing.assert_array_equal(merged.sample_ids, [10, 11, 12])
        np.testing.assert_array_equal(a.counts, [1, 0, 2])

    def test_merge_mismatched_lengths(self):
        with self.assertRaises(ValueError):
            merge_counters([VisitCounter.zeros(2), VisitCounter.zeros(3)])
        with self.assertRaises(ValueError):
            merge_counters([])


class DataCollectorTests(unittest.TestCase):
    def test_synthetic_collect(self):
        train, valid = DataCollector("synthetic", n_train=80, n_valid=20, seed=1,
                                     synthetic_n=120, synthetic_d=3).collect()
        self.assertEqual((len(train), len(valid)), (80, 20))
        self.assertEqual(train.dim, 3)

    def test_missing_files(self):
        collector = DataCollector("mnist", 10, 10, mnist_images="/nonexistent/images",
                                  mnist_labels="/nonexistent/labels")
        with self.assertRaises(DatasetError):
            collector.load()

    def test_mnist_needs_paths(self):
        with self.assertRaises(DatasetError):
            DataCollector("mnist", 10, 10).load()

    def test_unknown_source(self):
        with self.assertRaises(DatasetError):
            DataCollector("imagenet", 10, 10).load()


@unittest.skipUnless(os.environ.get("DP_TUNE_MNIST_DIR"), "set DP_TUNE_MNIST_DIR to the raw MNIST files")
class RealMnistTests(unittest.TestCase):
    def test_label_histogram_matches_raw_bytes(self):
        root = os.environ["DP_TUNE_MNIST_DIR"]
        images = os.path.join(root, "train-images-idx3-ubyte")
        labels = os.path.join(root, "train-labels-idx1-ubyte")
        ds = load_mnist_idx(images, labels)
        with open(labels, "rb") as f:
            raw = f.read()
        expected = np.bincount(np.frombuffer(raw[8:], dtype=np.uint8), minlength=10)
        self.assertEqual(len(ds), 60000)
        self.assertEqual(ds.dim, 784)
        np.testing.assert_array_equal(np.bincount(ds.labels, minlength=10), expected)


@unittest.skipUnless(os.environ.get("DP_TUNE_CIFAR_DIR"), "set DP_TUNE_CIFAR_DIR to the CIFAR-10 binary batches")
class RealCifarTests(unittest.TestCase):
    def test_first_batch(self):
        path = os.path.join(os.environ["DP_TUNE_CIFAR_DIR"], "data_batch_1.bin")
        ds = load_cifar10_bin([path])
        with open(path, "rb") as f:
            raw = np.frombuffer(f.read(), dtype=np.uint8).reshape(-1, 3073)
        self.assertEqual(len(ds), 10000)
        np.testing.assert_array_equal(np.bincount(ds.labels, minlength=10),
                                      np.bincount(raw[:, 0], minlength=10))


if __name__ == "__main__":
    unittest.main()
