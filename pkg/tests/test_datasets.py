import numpy as np
import pytest

from krlab import datasets as ds


def test_builtin_registry_specs():
    spec = ds.get_spec("CIFAR10")
    assert (spec.num_classes, spec.channels) == (10, 3)
    assert (spec.train_size, spec.val_size, spec.test_size) == (40000, 10000, 10000)
    assert ds.get_spec("BloodMNIST").total == 11959 + 1712 + 3421
    assert ds.get_spec("PneumoniaMNIST").num_classes == 2
    assert ds.get_spec("RetinaMNIST").num_classes == 5
    assert ds.get_spec("OrganSMNIST").num_classes == 11
    assert "toy-shapes" in ds.registered_names()


def test_get_spec_unknown_name():
    with pytest.raises(ds.DatasetError):
        ds.get_spec("no-such-dataset")


def test_toy_shapes_splits(toy_data):
    train, val, test = toy_data
    assert (len(train), len(val), len(test)) == (3000, 600, 600)
    for part in (train, val, test):
        assert part.images.shape[1:] == (32, 32, 3)
        assert part.images.dtype == np.float32
        assert part.images.min() >= 0.0 and part.images.max() <= 1.0
        assert part.labels.dtype == np.int64
        assert part.num_classes == 3
        assert set(np.unique(part.labels)) <= {0, 1, 2}
    # roughly class balanced
    counts = np.bincount(train.labels, minlength=3)
    assert counts.min() > 800


def test_toy_shapes_distinguishable(toy_data):
    # per-class mean images should differ clearly, or the dataset is untrainable
    train = toy_data[0]
    means = [train.images[train.labels == c].mean(axis=0) for c in range(3)]
    for a in range(3):
        for b in range(a + 1, 3):
            assert np.abs(means[a] - means[b]).mean() > 0.01


def test_toy_cache_roundtrip(toy_data, data_root, tmp_path):
    again = ds.load_dataset("toy-shapes", data_root)
    fresh = ds.load_dataset("toy-shapes", str(tmp_path))  # regenerated, not cached
    for i in range(3):
        np.testing.assert_array_equal(toy_data[i].images, again[i].images)
        np.testing.assert_array_equal(toy_data[i].images, fresh[i].images)
        np.testing.assert_array_equal(toy_data[i].labels, fresh[i].labels)


def test_register_toy_dataset(tmp_path):
    spec = ds.DatasetSpec("toy-two", 2, 1, 100, 40, 40)
    name = ds.register_toy_dataset(spec, generator_seed=7)
    train, val, test = ds.load_dataset(name, str(tmp_path))
    assert len(train) == 100 and train.num_classes == 2 and train.channels == 1
    with pytest.raises(ds.DatasetError):
        ds.register_toy_dataset(ds.DatasetSpec("toy-two", 3, 1, 10, 5, 5), 0)
    with pytest.raises(ds.DatasetError):
        ds.register_toy_dataset(ds.DatasetSpec("toy-many", 9, 1, 10, 5, 5), 0)


def test_labeled_dataset_validation():
    good = np.zeros((4, 32, 32, 3), dtype=np.float32)
    labels = np.zeros(4, dtype=np.int64)
    ds.LabeledDataset(good, labels, 2, "train", "x")
    with pytest.raises(ds.DatasetError):
        ds.LabeledDataset(np.zeros((4, 16, 16, 3), np.float32), labels, 2, "train", "x")
    with pytest.raises(ds.DatasetError):
        ds.LabeledDataset(good + 2.0, labels, 2, "train", "x")
    with pytest.raises(ds.DatasetError):
        ds.LabeledDataset(good, labels + 5, 2, "train", "x")
    with pytest.raises(ds.DatasetError):
        ds.LabeledDataset(good[:0], labels[:0], 2, "train", "x")


def test_subset(toy_data):
    train = toy_data[0]
    sub = train.subset(np.arange(10), split="val")
    assert len(sub) == 10 and sub.split == "val"
    np.testing.assert_array_equal(sub.images, train.images[:10])


def test_shadow_split_sizes_examples():
    assert ds.shadow_split_sizes(1712) == (770, 172, 770)
    assert ds.shadow_split_sizes(100) == (45, 10, 45)
    assert ds.shadow_split_sizes(600) == (270, 60, 270)
    with pytest.raises(ds.DatasetError):
        ds.shadow_split_sizes(19)


def test_make_shadow_split(toy_data):
    val = toy_data[1]
    split = ds.make_shadow_split(val, seed=3)
    n_m, n_h, n_nm = ds.shadow_split_sizes(len(val))
    assert (len(split.member_part), len(split.holdout_part), len(split.nonmember_part)) == \
        (n_m, n_h, n_nm)
    # disjoint and exhaustive: pixel multisets match the original
    total = len(split.member_part) + len(split.holdout_part) + len(split.nonmember_part)
    assert total == len(val)
    joined = np.concatenate([split.member_part.images, split.holdout_part.images,
                             split.nonmember_part.images])
    assert np.isclose(joined.sum(), val.images.sum(), rtol=1e-5)
    # seeded: same seed reproduces, different seed reshuffles
    again = ds.make_shadow_split(val, seed=3)
    np.testing.assert_array_equal(split.member_part.images, again.member_part.images)
    other = ds.make_shadow_split(val, seed=4)
    assert not np.array_equal(split.member_part.images, other.member_part.images)
