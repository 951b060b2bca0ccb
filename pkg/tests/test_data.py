import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spheremetric.classify import KnnIndex, knn_classify
from spheremetric.data import (
    NO_AUGMENT,
    AugmentConfig,
    Dataset,
    augment_sample,
    flip_horizontal,
    gen_gaussian_clusters,
    load_dataset,
    rotate,
    save_dataset,
    stratified_split,
)
from spheremetric.errors import ContractError, IngestionError
from spheremetric.geometry import EmbeddingBatch, l2_normalize
from spheremetric.numerics import Rng


def test_clusters_zero_spread():
    ds = gen_gaussian_clusters(Rng(0), 3, 5, 4, center_separation=2.0, spread=0.0)
    for c in range(3):
        members = ds.x[ds.labels == c]
        assert np.all(members == members[0])
        assert np.linalg.norm(members[0]) == pytest.approx(2.0)


def test_clusters_deterministic():
    a = gen_gaussian_clusters(Rng(5), 3, 4, 10, 3.0, 1.0)
    b = gen_gaussian_clusters(Rng(5), 3, 4, 10, 3.0, 1.0)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.labels, b.labels)


def test_clusters_min_angle():
    ds = gen_gaussian_clusters(Rng(1), 3, 2, 1, 1.0, 0.0, min_angle=math.radians(100))
    c = ds.x / np.linalg.norm(ds.x, axis=1, keepdims=True)
    angles = np.degrees(np.arccos(np.clip(c @ c.T, -1, 1)))
    assert angles[np.triu_indices(3, 1)].min() >= 100


def test_clusters_well_separated_knn_perfect():
    ds = gen_gaussian_clusters(Rng(2), 3, 8, 40, center_separation=10.0, spread=1.0)
    train, test = stratified_split(ds, 0.5, Rng(3))
    # raw-vector Euclidean 1-NN, brute force
    d = ((test.x[:, None, :] - train.x[None, :, :]) ** 2).sum(-1)
    pred = train.labels[d.argmin(axis=1)]
    assert (pred == test.labels).mean() == 1.0


def write_manifest(tmp_path, samples, class_names=("a", "b"), scale=None):
    entries = []
    for i, (arr, shape, label) in enumerate(samples):
        name = f"s{i}.f32"
        np.asarray(arr, dtype="<f4").tofile(tmp_path / name)
        entries.append({"path": name, "shape": shape, "label": label})
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"class_names": list(class_names), "scale": scale, "samples": entries}))
    return path


def test_load_empty_manifest(tmp_path):
    path = write_manifest(tmp_path, [])
    with pytest.warns(UserWarning):
        ds = load_dataset(path)
    assert len(ds) == 0 and ds.class_names == ["a", "b"]


def test_load_image_with_scale(tmp_path):
    path = write_manifest(tmp_path, [(np.arange(4) * 50.0, [2, 2, 1], 1)], scale=1 / 255)
    ds = load_dataset(path)
    assert ds.x.shape == (1, 2, 2, 1)
    assert (tmp_path / "s0.f32").stat().st_size == 16
    np.testing.assert_allclose(ds.x[0, :, :, 0], [[0, 50 / 255], [100 / 255, 150 / 255]], rtol=1e-6)


def test_load_shape_mismatch_names_file(tmp_path):
    path = write_manifest(tmp_path, [(np.zeros(2), [2, 2, 1], 0)])
    with pytest.raises(IngestionError, match="s0.f32"):
        load_dataset(path)


def test_load_missing_file_and_bad_label(tmp_path):
    path = write_manifest(tmp_path, [(np.zeros(4), [4], 0)])
    (tmp_path / "s0.f32").unlink()
    with pytest.raises(IngestionError, match="missing"):
        load_dataset(path)
    path = write_manifest(tmp_path, [(np.zeros(4), [4], 7)])
    with pytest.raises(IngestionError, match="label 7"):
        load_dataset(path)


def test_load_unscaled_image_out_of_range(tmp_path):
    path = write_manifest(tmp_path, [(np.full(4, 200.0), [2, 2, 1], 0)])
    with pytest.raises(IngestionError, match="scale"):
        load_dataset(path)


def test_save_load_round_trip(tmp_path):
    ds = gen_gaussian_clusters(Rng(0), 2, 3, 4, 2.0, 0.5)
    loaded = load_dataset(save_dataset(ds, tmp_path))
    np.testing.assert_allclose(loaded.x, ds.x, rtol=1e-6)
    assert loaded.labels.tolist() == ds.labels.tolist()


def pattern(h=4, w=4, c=1):
    return (np.arange(h * w * c, dtype=float).reshape(h, w, c) + 1) / (h * w * c + 1)


def test_augment_neutral_is_identity():
    img = pattern(5, 6, 3)
    np.testing.assert_array_equal(augment_sample(img, NO_AUGMENT, Rng(0)), img)


def test_flip_involution():
    img = pattern(4, 5, 2)
    np.testing.assert_array_equal(flip_horizontal(flip_horizontal(img)), img)
    assert not np.array_equal(flip_horizontal(img), img)


def test_rotate_90_permutation():
    img = pattern()
    out = rotate(img, 90.0)[:, :, 0]
    # counter-clockwise: out[i, j] = in[j, n - 1 - i]
    want = np.array([[img[j, 3 - i, 0] for j in range(4)] for i in range(4)])
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_augment_deterministic():
    img = pattern(6, 6, 3)
    cfg = AugmentConfig()
    assert np.array_equal(augment_sample(img, cfg, Rng(9)), augment_sample(img, cfg, Rng(9)))


@settings(max_examples=40, deadline=None)
@given(rot=st.floats(0, 180), bright=st.floats(0, 1), flip=st.floats(0, 1), zoom=st.floats(0, 1),
       seed=st.integers(0, 2 ** 32))
def test_augment_preserves_shape_and_range(rot, bright, flip, zoom, seed):
    img = pattern(5, 7, 3)
    out = augment_sample(img, AugmentConfig(rot, bright, flip, zoom), Rng(seed))
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_augment_config_validation():
    with pytest.raises(ContractError):
        AugmentConfig(rotation_degrees=-1)
    with pytest.raises(ContractError):
        AugmentConfig(flip_probability=1.5)


def sized_dataset(sizes):
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(sizes)])
    return Dataset(np.arange(len(labels), dtype=float)[:, None], labels)


def test_split_reference_class_sizes():
    train, test = stratified_split(sized_dataset([708, 1426, 930]), 0.7, Rng(0))
    assert np.bincount(train.labels).tolist() == [495, 998, 651]
    assert np.bincount(test.labels).tolist() == [213, 428, 279]


def test_split_even_halves():
    train, test = stratified_split(sized_dataset([10, 20]), 0.5, Rng(0))
    assert np.bincount(train.labels).tolist() == np.bincount(test.labels).tolist() == [5, 10]


@settings(max_examples=30, deadline=None)
@given(sizes=st.lists(st.integers(4, 60), min_size=2, max_size=4), frac=st.floats(0.3, 0.7),
       seed=st.integers(0, 1000))
def test_split_partitions(sizes, frac, seed):
    ds = sized_dataset(sizes)
    train, test = stratified_split(ds, frac, Rng(seed))
    ids_train, ids_test = set(train.x[:, 0]), set(test.x[:, 0])
    assert ids_train.isdisjoint(ids_test)
    assert ids_train | ids_test == set(ds.x[:, 0])
    for c, n in enumerate(sizes):
        assert abs((train.labels == c).sum() - frac * n) <= 1


def test_split_swap_protocol():
    ds = sized_dataset([708, 1426, 930])
    train70, test30 = stratified_split(ds, 0.7, Rng(4))
    train30, test70 = test30, train70
    assert np.bincount(train30.labels).tolist() == [213, 428, 279]
    assert np.array_equal(test70.x, train70.x)


def test_split_deterministic_and_errors():
    ds = sized_dataset([10, 10])
    a, _ = stratified_split(ds, 0.6, Rng(1))
    b, _ = stratified_split(ds, 0.6, Rng(1))
    assert np.array_equal(a.x, b.x)
    with pytest.raises(ContractError):
        stratified_split(ds, 1.0, Rng(1))
    with pytest.raises(ContractError, match="empty partition"):
        stratified_split(sized_dataset([10, 1]), 0.5, Rng(1))
