import json
import os
import pickle

import numpy as np
import pytest

from vitrojan.datasets import (FAMILIES, LabeledDataset, SurrogateDataset, SurrogatePolicy, SyntheticSpec,
                               conform, export_raw, family_classes, gen_synthetic, import_archive, load_raw,
                               make_surrogate, resize_nearest, split)
from vitrojan.error import (DataError, DimensionError, DisjointnessError, EmptyDatasetError, HeaderError,
                            InsufficientSamplesError, LabelRangeError, LayoutError, MissingArtifactError,
                            PayloadError, SidecarError, UnknownFamilyError)
from vitrojan.tensor_io import TENSOR_MAGIC, write_records


def test_families_are_disjoint():
    assert not set(FAMILIES['shapes']) & set(FAMILIES['glyphs'])

    with pytest.raises(UnknownFamilyError, match="Unknown class family 'cifar'"):
        family_classes('cifar')


def test_gen_synthetic():
    spec = SyntheticSpec(family='shapes', image_size=16, channels=3)
    data = gen_synthetic(spec, 10, seed=0)
    assert data.images.shape == (10, 3, 16, 16)
    assert data.images.min() >= 0 and data.images.max() <= 1
    assert data.class_names == family_classes('shapes')
    assert sorted(np.bincount(data.labels)) == [2, 2, 3, 3]


def test_gen_synthetic_is_deterministic():
    spec = SyntheticSpec(family='glyphs', image_size=8, channels=1)
    a = gen_synthetic(spec, 12, seed=3)
    b = gen_synthetic(spec, 12, seed=3)
    c = gen_synthetic(spec, 12, seed=4)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, c.images)


def test_gen_synthetic_errors():
    with pytest.raises(EmptyDatasetError):
        gen_synthetic(SyntheticSpec(), 0, seed=0)

    with pytest.raises(DataError, match="min_scale"):
        SyntheticSpec(min_scale=0.5, max_scale=0.2)


def test_dataset_validation():
    with pytest.raises(LabelRangeError):
        LabeledDataset(np.zeros((2, 1, 4, 4)), [0, 2], ['a', 'b'])

    with pytest.raises(DataError, match=r"pixel values must lie in \[0, 1\]"):
        LabeledDataset(np.full((1, 1, 4, 4), 2.0), [0], ['a'])


def test_export_load_raw(tmp_path, main_data):
    path = str(tmp_path / 'main')
    export_raw(main_data, path, extra=dict(config_hash='xyz'))

    with open(os.path.join(path, 'meta.json')) as f:
        meta = json.load(f)
    assert meta['shape'] == list(main_data.images.shape)
    assert meta['config_hash'] == 'xyz'

    loaded = load_raw(path)
    assert type(loaded) is LabeledDataset
    assert np.array_equal(loaded.images, main_data.images)
    assert np.array_equal(loaded.labels, main_data.labels)
    assert loaded.class_names == main_data.class_names


def test_load_raw_errors(tmp_path, main_data):
    path = str(tmp_path / 'main')
    with pytest.raises(SidecarError, match="has no meta.json"):
        load_raw(path)

    export_raw(main_data, path)
    write_records(os.path.join(path, 'labels.bin'), {'labels': np.zeros(3)}, TENSOR_MAGIC)
    with pytest.raises(LayoutError, match="declares shape"):
        load_raw(path)

    labels = main_data.labels.astype(np.float64)
    labels[0] = 0.5
    write_records(os.path.join(path, 'labels.bin'), {'labels': labels}, TENSOR_MAGIC)
    with pytest.raises(PayloadError, match="not integers"):
        load_raw(path)


def test_resize_nearest():
    images = np.arange(16.0).reshape(1, 1, 4, 4) / 16
    up = resize_nearest(images, 8)
    assert up.shape == (1, 1, 8, 8)
    assert up[0, 0, 1, 1] == images[0, 0, 0, 0]
    assert up[0, 0, 7, 6] == images[0, 0, 3, 3]
    assert np.array_equal(resize_nearest(up, 4), images)


def test_conform_keeps_provenance(surrogate_pool):
    policy = SurrogatePolicy(source_name='glyphs', count=10, seed=0)
    sur = make_surrogate(surrogate_pool, policy, family_classes('shapes'))
    resized = conform(sur, 16)
    assert isinstance(resized, SurrogateDataset)
    assert resized.provenance == 'glyphs'
    assert resized.images.shape[-1] == 16
    assert conform(sur, 8) is sur


def test_make_surrogate(surrogate_pool):
    policy = SurrogatePolicy(source_name='glyphs', count=20, seed=1)
    sur = make_surrogate(surrogate_pool, policy, family_classes('shapes'))
    assert len(sur) == 20
    assert sur.provenance == 'glyphs'
    assert not sur.present_classes() & set(family_classes('shapes'))

    again = make_surrogate(surrogate_pool, policy, family_classes('shapes'))
    assert np.array_equal(sur.images, again.images)


def test_make_surrogate_errors(surrogate_pool):
    with pytest.raises(InsufficientSamplesError, match="requests 31 samples"):
        make_surrogate(surrogate_pool, SurrogatePolicy(count=31), [])

    with pytest.raises(DisjointnessError, match="ring"):
        make_surrogate(surrogate_pool, SurrogatePolicy(count=5), ['ring', 'bars'])

    # allowed when disjointness is not required
    sur = make_surrogate(surrogate_pool, SurrogatePolicy(count=5, require_disjoint=False), ['ring'])
    assert len(sur) == 5


def test_split(main_data):
    first, second = split(main_data, 0.25, seed=0)
    assert len(second) == 6 and len(first) == 18
    combined = np.concatenate([first.images, second.images])
    assert sorted(map(bytes, combined)) == sorted(map(bytes, main_data.images))

    whole, empty = split(main_data, 0.0, seed=0)
    assert len(whole) == len(main_data) and len(empty) == 0


def _write_batch(directory, images, labels, names=None, key=b'labels'):
    """
    Write ``images`` ([N, c, h, w] uint8) as a CIFAR-style pickled batch.
    """
    path = os.path.join(directory, 'data_batch_1')
    with open(path, 'wb') as f:
        pickle.dump({b'data': images.reshape(len(images), -1), key: list(labels)}, f)

    if names is not None:
        with open(os.path.join(directory, 'batches.meta'), 'wb') as f:
            pickle.dump({b'label_names': [n.encode('utf-8') for n in names]}, f)

    return path


def test_import_pickled_batch(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(5, 3, 4, 4), dtype=np.uint8)
    path = _write_batch(str(tmp_path), pixels, [0, 2, 1, 2, 0], names=['plane', 'car', 'bird'])

    data = import_archive(path, split='pool')
    assert data.images.shape == (5, 3, 4, 4)
    assert np.array_equal(data.images, pixels / 255.0)
    assert list(data.labels) == [0, 2, 1, 2, 0]
    assert data.class_names == ['plane', 'car', 'bird']
    assert data.name == 'data_batch_1' and data.split == 'pool'


def test_import_pickled_batch_fine_labels(tmp_path):
    pixels = np.zeros((2, 1, 3, 3), dtype=np.uint8)
    path = _write_batch(str(tmp_path), pixels, [1, 3], key=b'fine_labels')

    data = import_archive(path, channels=1)
    assert data.images.shape == (2, 1, 3, 3)
    assert data.class_names == ['class0', 'class1', 'class2', 'class3']

    named = import_archive(path, class_names=list('abcd'), channels=1)
    assert named.present_classes() == {'b', 'd'}


def test_import_npz(tmp_path):
    rng = np.random.default_rng(1)
    channels_last = rng.integers(0, 256, size=(4, 6, 6, 3), dtype=np.uint8)
    path = str(tmp_path / 'pool.npz')
    np.savez(path, images=channels_last, labels=np.array([0, 1, 1, 0]), class_names=np.array(['sky', 'sea']))

    data = import_archive(path)
    assert data.images.shape == (4, 3, 6, 6)
    assert np.array_equal(data.images, channels_last.transpose(0, 3, 1, 2) / 255.0)
    assert data.class_names == ['sky', 'sea']
    assert data.name == 'pool'

    gray = str(tmp_path / 'gray.npz')
    np.savez(gray, images=rng.uniform(size=(3, 5, 5)), labels=np.array([0, 0, 1]))
    data = import_archive(gray, channels=1)
    assert data.images.shape == (3, 1, 5, 5)
    assert data.class_names == ['class0', 'class1']


def _rgb_npz(tmp_path):
    path = str(tmp_path / 'rgb.npz')
    np.savez(path, images=np.zeros((2, 3, 4, 4), dtype=np.uint8), labels=np.array([0, 1]))
    return path


def test_import_archive_errors(tmp_path):
    with pytest.raises(MissingArtifactError, match="does not exist"):
        import_archive(str(tmp_path / 'missing.npz'))

    garbage = tmp_path / 'garbage'
    garbage.write_bytes(b'\x00\x01 not a pickle')
    with pytest.raises(HeaderError, match="not a pickled batch"):
        import_archive(str(garbage))

    path = str(tmp_path / 'nolabels.npz')
    np.savez(path, images=np.zeros((2, 1, 4, 4)))
    with pytest.raises(LayoutError, match="lacks the 'images' or 'labels'"):
        import_archive(path)

    path = str(tmp_path / 'bright.npz')
    np.savez(path, images=np.full((2, 1, 4, 4), 2.0), labels=np.array([0, 1]))
    with pytest.raises(DataError, match=r"\[0, 1\]"):
        import_archive(path)

    path = str(tmp_path / 'fractional.npz')
    np.savez(path, images=np.zeros((2, 1, 4, 4)), labels=np.array([0.5, 1.0]))
    with pytest.raises(PayloadError, match="not integers"):
        import_archive(path)

    path = _write_batch(str(tmp_path), np.zeros((2, 3, 4, 4), dtype=np.uint8), [0, 1])
    with pytest.raises(DimensionError, match="not 1 square planes"):
        import_archive(path, channels=1)    # 48 values are three planes, not one

    with pytest.raises(DimensionError, match="expected 1"):
        import_archive(_rgb_npz(tmp_path), channels=1)
