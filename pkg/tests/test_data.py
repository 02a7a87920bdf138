import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradshield import data as D


def _write_pair(tmp_path, n=6, rows=3, cols=2, seed=0):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(n, rows, cols), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    img, lab = tmp_path / "img.idx", tmp_path / "lab.idx"
    D.write_idx(img, lab, pixels, labels)
    return img, lab, pixels, labels


def test_idx_round_trip(tmp_path):
    img, lab, pixels, labels = _write_pair(tmp_path)
    ds = D.load_idx(img, lab)
    np.testing.assert_array_equal(ds.X, pixels.reshape(6, -1) / 255.0)
    np.testing.assert_array_equal(ds.labels, labels)
    assert ds.num_classes == 10 and len(ds.source_hash) == 64


def test_idx_hand_built_bytes(tmp_path):
    # two 1x2 images, written byte by byte
    img = struct.pack(">IIII", 0x803, 2, 1, 2) + bytes([0, 255, 51, 102])
    lab = struct.pack(">II", 0x801, 2) + bytes([7, 3])
    (tmp_path / "i").write_bytes(img)
    (tmp_path / "l").write_bytes(lab)
    ds = D.load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_allclose(ds.X, [[0.0, 1.0], [0.2, 0.4]])
    assert list(ds.labels) == [7, 3]


def test_gzip_is_detected(tmp_path):
    img, lab, pixels, _ = _write_pair(tmp_path)
    gz = tmp_path / "img.gz"
    gz.write_bytes(gzip.compress(img.read_bytes()))
    np.testing.assert_array_equal(D.load_idx(gz, lab).X, D.load_idx(img, lab).X)


def test_bad_magic(tmp_path):
    img, lab, *_ = _write_pair(tmp_path)
    raw = bytearray(img.read_bytes())
    raw[3] = 0x01
    img.write_bytes(bytes(raw))
    with pytest.raises(D.BadMagicError) as e:
        D.load_idx(img, lab)
    assert e.value.offset == 0


def test_count_mismatch(tmp_path):
    img, lab, pixels, labels = _write_pair(tmp_path)
    D.write_idx(tmp_path / "i2", tmp_path / "l2", pixels, labels[:-1])
    with pytest.raises(D.CountMismatchError):
        D.load_idx(img, tmp_path / "l2")


@pytest.mark.parametrize("cut", [2, 10, 20])
def test_truncated_images(tmp_path, cut):
    img, lab, *_ = _write_pair(tmp_path)
    img.write_bytes(img.read_bytes()[:cut])
    with pytest.raises(D.TruncatedFileError) as e:
        D.load_idx(img, lab)
    assert e.value.offset == cut


def test_label_out_of_range(tmp_path):
    img, lab, pixels, labels = _write_pair(tmp_path)
    labels = labels.copy()
    labels[4] = 12
    D.write_idx(img, lab, pixels, labels)
    with pytest.raises(D.IdxError) as e:
        D.load_idx(img, lab)
    assert e.value.offset == 12


def test_bundled_mnist_subset():
    train, val, test = D.load_desk_mnist()
    assert (len(train), len(val), len(test)) == (5000, 1000, 4000)
    assert train.X.shape[1] == 784
    counts = np.bincount(np.concatenate([train.labels, val.labels, test.labels]), minlength=10)
    assert counts.sum() == 10000 and counts.min() > 800


def test_dataset_validation():
    with pytest.raises(ValueError):
        D.Dataset(np.full((2, 2), 1.5), np.eye(2))
    with pytest.raises(ValueError):
        D.Dataset(np.zeros((2, 2)), np.array([[1.0, 1.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        D.Dataset(np.zeros((3, 2)), np.eye(2))
    ds = D.Dataset(np.zeros((2, 2)), np.eye(2))
    with pytest.raises(ValueError):
        ds.X[0, 0] = 0.5


@pytest.mark.parametrize("kind,k", [("blobs", 3), ("blobs", 5), ("xor-grid", 2)])
def test_synthetic_fixtures(kind, k):
    ds = D.make_synthetic(kind, 101, seed=4, num_classes=k)
    again = D.make_synthetic(kind, 101, seed=4, num_classes=k)
    np.testing.assert_array_equal(ds.X, again.X)
    counts = np.bincount(ds.labels, minlength=k)
    assert counts.max() - counts.min() <= 1
    assert ds.X.min() >= 0 and ds.X.max() <= 1
    if kind == "xor-grid":
        cells = np.minimum((ds.X * 4).astype(int), 3)
        np.testing.assert_array_equal(cells.sum(axis=1) % 2, ds.labels)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2**31), st.floats(0, 1), st.floats(0, 1))
def test_split_partitions_exactly(n, seed, a, b):
    fr = (a / 2, b / 2, 1 - a / 2 - b / 2)
    ds = D.Dataset(np.arange(n, dtype=float)[:, None] / max(n, 1), D.one_hot(np.zeros(n, int), 1))
    parts = D.split(ds, fr, seed)
    ids = np.concatenate([p.X[:, 0] for p in parts])
    np.testing.assert_array_equal(np.sort(ids), ds.X[:, 0])
    again = D.split(ds, fr, seed)
    for p, q in zip(parts, again):
        np.testing.assert_array_equal(p.X, q.X)


def test_split_rejects_bad_fractions():
    ds = D.make_synthetic("blobs", 10, 0)
    with pytest.raises(ValueError):
        D.split(ds, (0.5, 0.6, -0.1))


def test_dataset_container_round_trip(tmp_path):
    ds = D.make_synthetic("blobs", 20, 1)
    D.save_dataset(tmp_path / "d.gsh", ds)
    back = D.load_dataset(tmp_path / "d.gsh")
    np.testing.assert_array_equal(back.X, ds.X)
    assert back.source_hash == ds.source_hash
