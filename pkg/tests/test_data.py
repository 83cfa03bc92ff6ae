"""Synthetic data and augmentations: determinism, file round trips, and
per-sample augmentation streams that ignore batch composition."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disco.data import (AugmentationPolicy, augment_batch, batch_indices,
                        load_dataset_file, make_synthetic_dataset,
                        sample_label_fraction, save_dataset_file, two_views)


def _policy(**over):
    base = dict(crop_scale_min=0.6, crop_scale_max=1.0, flip_prob=0.5,
                noise_std=0.02, channel_jitter=0.1)
    base.update(over)
    return AugmentationPolicy(**base)


class TestSyntheticDataset:
    def test_shapes_labels_ranges(self, tiny_dataset):
        ds = tiny_dataset
        assert ds.train.images.shape == (160, 3, 16, 16)
        assert ds.test.images.shape == (60, 3, 16, 16)
        assert ds.train.images.dtype == np.float32
        assert ds.train.images.min() >= 0.0
        assert ds.train.images.max() <= 1.0
        assert set(np.unique(ds.train.labels)) == {0, 1, 2, 3}
        counts = np.bincount(ds.train.labels)
        assert (counts == 40).all()

    def test_bitwise_regeneration(self, tiny_dataset):
        again = make_synthetic_dataset(num_classes=4, per_class=40,
                                       test_per_class=15, height=16, width=16,
                                       channels=3, seed=7, recipe="blobs")
        np.testing.assert_array_equal(again.train.images,
                                      tiny_dataset.train.images)
        np.testing.assert_array_equal(again.test.labels,
                                      tiny_dataset.test.labels)

    def test_seed_changes_content(self, tiny_dataset):
        other = make_synthetic_dataset(num_classes=4, per_class=40,
                                       test_per_class=15, height=16, width=16,
                                       channels=3, seed=8, recipe="blobs")
        assert not np.array_equal(other.train.images,
                                  tiny_dataset.train.images)

    def test_recipes_differ(self, tiny_dataset, tiny_rings):
        assert not np.array_equal(tiny_dataset.train.images,
                                  tiny_rings.train.images)

    def test_file_roundtrip_bit_exact(self, tiny_dataset, tmp_path):
        path = tmp_path / "train.dat"
        save_dataset_file(path, tiny_dataset.train, tiny_dataset.num_classes)
        split, k = load_dataset_file(path)
        assert k == tiny_dataset.num_classes
        np.testing.assert_array_equal(split.images, tiny_dataset.train.images)
        np.testing.assert_array_equal(split.labels, tiny_dataset.train.labels)

    def test_file_rejects_corruption(self, tiny_dataset, tmp_path):
        path = tmp_path / "train.dat"
        save_dataset_file(path, tiny_dataset.train, tiny_dataset.num_classes)
        raw = bytearray(path.read_bytes())
        raw[4] ^= 0xFF  # header field
        path.write_bytes(bytes(raw))
        with pytest.raises(Exception):
            load_dataset_file(path)


class TestAugmentations:
    def test_deterministic_given_seed(self, tiny_dataset):
        idx = np.arange(8)
        a = augment_batch(tiny_dataset.train.images, idx, _policy(), 3, slot=0)
        b = augment_batch(tiny_dataset.train.images, idx, _policy(), 3, slot=0)
        np.testing.assert_array_equal(a, b)

    def test_slots_differ(self, tiny_dataset):
        idx = np.arange(8)
        a = augment_batch(tiny_dataset.train.images, idx, _policy(), 3, slot=0)
        b = augment_batch(tiny_dataset.train.images, idx, _policy(), 3, slot=1)
        assert not np.array_equal(a, b)

    def test_per_sample_stream_ignores_batch_composition(self, tiny_dataset):
        # sample 5 augmented alone equals sample 5 augmented inside a batch
        imgs = tiny_dataset.train.images
        alone = augment_batch(imgs, np.array([5]), _policy(), 11, slot=0)
        batched = augment_batch(imgs, np.arange(10), _policy(), 11, slot=0)
        np.testing.assert_array_equal(alone[0], batched[5])

    def test_output_range_and_dtype(self, tiny_dataset):
        out = augment_batch(tiny_dataset.train.images, np.arange(16),
                            _policy(noise_std=0.3), 1, slot=0)
        assert out.dtype == np.float32
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_identity_when_disabled(self, tiny_dataset):
        pol = _policy(crop_scale_min=1.0, crop_scale_max=1.0, flip_prob=0.0,
                      noise_std=0.0, channel_jitter=0.0)
        idx = np.arange(6)
        out = augment_batch(tiny_dataset.train.images, idx, pol, 2, slot=0)
        np.testing.assert_allclose(out, tiny_dataset.train.images[idx],
                                   atol=1e-6)

    def test_flip_only_is_involution(self, tiny_dataset):
        pol = _policy(crop_scale_min=1.0, crop_scale_max=1.0, flip_prob=1.0,
                      noise_std=0.0, channel_jitter=0.0)
        idx = np.arange(6)
        once = augment_batch(tiny_dataset.train.images, idx, pol, 2, slot=0)
        twice = augment_batch(once, np.arange(6), pol, 2, slot=0)
        np.testing.assert_allclose(twice, tiny_dataset.train.images[idx],
                                   atol=1e-6)

    def test_two_views_disabled_policy_bit_equal(self, tiny_dataset):
        pol = AugmentationPolicy(crop_scale_min=1.0, crop_scale_max=1.0,
                                 flip_prob=0.0, noise_std=0.0,
                                 channel_jitter=0.0)
        vp = two_views(tiny_dataset.train, np.arange(4), pol, 9)
        np.testing.assert_array_equal(vp.view_q, vp.view_k)

    def test_two_views_enabled_views_differ(self, tiny_dataset):
        vp = two_views(tiny_dataset.train, np.arange(4), _policy(), 9)
        assert not np.array_equal(vp.view_q, vp.view_k)


class TestLabelFractions:
    def test_every_class_present(self, tiny_dataset):
        idx = sample_label_fraction(tiny_dataset.train, 0.01, seed=0)
        labels = tiny_dataset.train.labels[idx]
        assert set(np.unique(labels)) == set(range(4))

    def test_share_oracle(self, tiny_dataset):
        # 40 per class at 10% -> exactly 4 per class
        idx = sample_label_fraction(tiny_dataset.train, 0.1, seed=0)
        counts = np.bincount(tiny_dataset.train.labels[idx], minlength=4)
        assert (counts == 4).all()

    @given(st.floats(0.02, 0.98), st.floats(0.02, 0.98),
           st.integers(0, 2 ** 32))
    @settings(max_examples=25, deadline=None)
    def test_nesting_property(self, f1, f2, seed):
        labels = np.repeat(np.arange(5), 37)
        images = np.zeros((labels.size, 1, 2, 2), dtype=np.float32)
        from disco.data import DatasetSplit
        split = DatasetSplit(images, labels)
        small, big = sorted((f1, f2))
        a = set(sample_label_fraction(split, small, seed).tolist())
        b = set(sample_label_fraction(split, big, seed).tolist())
        assert a <= b

    def test_full_fraction_is_everything(self, tiny_dataset):
        idx = sample_label_fraction(tiny_dataset.train, 1.0, seed=0)
        assert idx.size == len(tiny_dataset.train)


class TestBatching:
    def test_partition_covers_all(self):
        batches = batch_indices(103, 20, seed=4)
        joined = np.concatenate(batches)
        assert sorted(joined.tolist()) == list(range(103))
        assert [len(b) for b in batches] == [20, 20, 20, 20, 20, 3]

    def test_shuffle_deterministic_and_seed_sensitive(self):
        a = batch_indices(50, 10, seed=1)
        b = batch_indices(50, 10, seed=1)
        c = batch_indices(50, 10, seed=2)
        np.testing.assert_array_equal(np.concatenate(a), np.concatenate(b))
        assert not np.array_equal(np.concatenate(a), np.concatenate(c))

    def test_no_shuffle_keeps_order(self):
        batches = batch_indices(7, 3, seed=0, shuffle=False)
        np.testing.assert_array_equal(np.concatenate(batches), np.arange(7))
