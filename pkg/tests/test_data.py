"""Container round-trips, CIFAR record parsing, augmentation, batching."""

import numpy as np
import pytest

from pmkd.data import (
    AugmentPolicy,
    DatasetContainer,
    DatasetError,
    augment,
    default_policy,
    import_cifar,
    minibatches,
    normalize_images,
    subset,
)

import synthdata


def tiny_container(n=10, c=3, h=8, w=8, k=4, seed=0):
    rng = np.random.default_rng(seed)
    return DatasetContainer(
        images=rng.integers(0, 256, (n, c, h, w), dtype=np.uint8),
        labels=rng.integers(0, k, n).astype(np.uint16),
        num_classes=k,
        mean=np.full(c, 0.5, np.float32),
        std=np.full(c, 0.25, np.float32),
    )


class TestContainerFormat:
    def test_round_trip_bit_stable(self, tmp_path):
        cont = tiny_container()
        p1 = tmp_path / "a.otfd"
        p2 = tmp_path / "b.otfd"
        cont.save(p1)
        loaded = DatasetContainer.load(p1)
        loaded.save(p2)
        assert p1.read_bytes() == p2.read_bytes()
        np.testing.assert_array_equal(loaded.images, cont.images)
        np.testing.assert_array_equal(loaded.labels, cont.labels)
        np.testing.assert_array_equal(loaded.mean, cont.mean)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.otfd"
        cont = tiny_container()
        cont.save(p)
        raw = bytearray(p.read_bytes())
        raw[:4] = b"NOPE"
        p.write_bytes(bytes(raw))
        with pytest.raises(DatasetError, match="magic"):
            DatasetContainer.load(p)

    def test_truncated_file_rejected(self, tmp_path):
        p = tmp_path / "short.otfd"
        tiny_container().save(p)
        raw = p.read_bytes()
        p.write_bytes(raw[:-5])
        with pytest.raises(DatasetError, match="bytes"):
            DatasetContainer.load(p)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(DatasetError, match="num_classes"):
            DatasetContainer(
                images=np.zeros((2, 1, 2, 2), np.uint8),
                labels=np.array([0, 5], np.uint16),
                num_classes=3,
                mean=np.array([0.5], np.float32),
                std=np.array([0.2], np.float32))

    def test_svhn_count_check(self, tmp_path):
        p = tmp_path / "svhn.otfd"
        tiny_container().save(p)
        with pytest.raises(DatasetError, match="SVHN"):
            DatasetContainer.load(p, kind="svhn")


class TestCifarImport:
    def test_synthetic_round_trip(self, tmp_path):
        train_p, test_p = synthdata.write_cifar10_files(tmp_path, 40, 12, seed=3)
        train, test = import_cifar("cifar10", [train_p], [test_p])
        assert train.count == 40 and test.count == 10 + 2
        assert train.num_classes == 10
        raw = np.frombuffer(train_p.read_bytes(), np.uint8).reshape(40, 3073)
        np.testing.assert_array_equal(train.labels, raw[:, 0])
        np.testing.assert_array_equal(train.images.reshape(40, -1), raw[:, 1:])
        # test split reuses training statistics
        np.testing.assert_array_equal(train.mean, test.mean)
        np.testing.assert_array_equal(train.std, test.std)

    def test_cifar100_takes_fine_label(self, tmp_path):
        # one handcrafted record: coarse label 7, fine label 42
        pixels = np.arange(3072, dtype=np.uint8)
        rec = bytes([7, 42]) + pixels.tobytes()
        p = tmp_path / "train.bin"
        p.write_bytes(rec)
        train, _ = import_cifar("cifar100", [p], [p])
        assert train.labels[0] == 42
        np.testing.assert_array_equal(train.images[0].ravel(), pixels)

    def test_record_size_mismatch_reports_offset(self, tmp_path):
        p = tmp_path / "broken.bin"
        p.write_bytes(bytes(3073 + 100))
        with pytest.raises(DatasetError, match="offset 3073"):
            import_cifar("cifar10", [p], [p])

    def test_container_survives_save_load(self, tmp_path):
        train_p, test_p = synthdata.write_cifar10_files(tmp_path, 20, 8, seed=4)
        train, _ = import_cifar("cifar10", [train_p], [test_p])
        out = tmp_path / "train.otfd"
        train.save(out)
        again = DatasetContainer.load(out)
        np.testing.assert_array_equal(again.images, train.images)


class TestAugment:
    def test_disabled_is_identity(self):
        img = np.random.default_rng(0).integers(0, 256, (3, 32, 32), np.uint8)
        out = augment(img, AugmentPolicy(enabled=False),
                      np.random.default_rng(1))
        np.testing.assert_array_equal(out, img)

    def test_center_crop_no_flip_is_identity(self):
        img = np.random.default_rng(1).integers(0, 256, (3, 32, 32), np.uint8)

        class FixedRng:
            def integers(self, lo, hi, size=None):
                return np.array([4, 4])

            def random(self):
                return 0.99  # above flip prob

        out = augment(img, AugmentPolicy(), FixedRng())
        np.testing.assert_array_equal(out, img)

    def test_double_flip_is_identity(self):
        img = np.random.default_rng(2).integers(0, 256, (3, 32, 32), np.uint8)
        flipped = img[:, :, ::-1]
        np.testing.assert_array_equal(flipped[:, :, ::-1], img)

    def test_output_shape_and_label_free(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 256, (3, 32, 32), np.uint8)
        for _ in range(10):
            assert augment(img, AugmentPolicy(), rng).shape == (3, 32, 32)

    def test_default_policy_per_dataset_kind(self):
        assert default_policy("cifar10").enabled
        assert default_policy("cifar100").enabled
        assert not default_policy("svhn").enabled


class TestMinibatches:
    def test_partial_batch_kept(self):
        cont = tiny_container(n=10)
        sizes = [len(y) for _, y in minibatches(cont, 4, seed=0)]
        assert sizes == [4, 4, 2]

    def test_same_seed_same_order(self):
        cont = tiny_container(n=23)
        a = [y for _, y in minibatches(cont, 5, seed=9)]
        b = [y for _, y in minibatches(cont, 5, seed=9)]
        for ya, yb in zip(a, b):
            np.testing.assert_array_equal(ya, yb)

    def test_epoch_changes_order(self):
        cont = tiny_container(n=32)
        a = np.concatenate([y for _, y in minibatches(cont, 8, seed=1, epoch=0)])
        b = np.concatenate([y for _, y in minibatches(cont, 8, seed=1, epoch=1)])
        assert not np.array_equal(a, b)
        np.testing.assert_array_equal(np.sort(a), np.sort(b))

    def test_each_record_visited_once(self):
        cont = tiny_container(n=17, k=17)
        cont.labels = np.arange(17, dtype=np.uint16)  # unique ids
        seen = np.concatenate([y for _, y in minibatches(cont, 4, seed=2)])
        np.testing.assert_array_equal(np.sort(seen), np.arange(17))

    def test_normalized_statistics(self, tmp_path):
        train_p, test_p = synthdata.write_cifar10_files(tmp_path, 400, 10, seed=5)
        train, _ = import_cifar("cifar10", [train_p], [test_p])
        xs = np.concatenate([x for x, _ in minibatches(
            train, 128, seed=0, shuffle=False)])
        assert abs(xs.mean()) < 0.05
        assert abs(xs.std() - 1.0) < 0.05

    def test_normalize_images_formula(self):
        imgs = np.full((1, 2, 2, 2), 128, np.uint8)
        mean = np.array([0.25, 0.5], np.float32)
        std = np.array([0.5, 0.25], np.float32)
        x = normalize_images(imgs, mean, std)
        np.testing.assert_allclose(x[0, 0], (128 / 255 - 0.25) / 0.5, atol=1e-6)
        np.testing.assert_allclose(x[0, 1], (128 / 255 - 0.5) / 0.25, atol=1e-6)

    def test_empty_container_rejected(self):
        cont = tiny_container(n=4)
        cont.images = cont.images[:0]
        cont.labels = cont.labels[:0]
        with pytest.raises(DatasetError, match="empty"):
            next(minibatches(cont, 2, seed=0))


class TestSubset:
    def test_two_class_subset_relabels(self):
        cont = tiny_container(n=60, k=6, seed=7)
        sub = subset(cont, classes=[2, 5], relabel=True)
        assert sub.num_classes == 2
        assert set(np.unique(sub.labels)) <= {0, 1}
        orig = cont.labels[np.isin(cont.labels, [2, 5])]
        assert sub.count == len(orig)

    def test_per_class_cap_deterministic(self):
        cont = tiny_container(n=200, k=4, seed=8)
        a = subset(cont, per_class=10, seed=3)
        b = subset(cont, per_class=10, seed=3)
        np.testing.assert_array_equal(a.images, b.images)
        assert a.count == 40
