import struct
from collections import Counter

import numpy as np
import pytest

from annealprune.data import (CIFAR_RECORD, BatchPlan, DataFormatError, Dataset, batches,
                              load_cifar10, load_mnist_idx, read_cifar10_batch, read_idx_images,
                              synth_blobs, to_bytes, to_unit, write_cifar10_batch, write_mnist_idx)
from annealprune.network import FLATTEN, SOFTMAX, Network, backward, dense, forward, sgd_step
from annealprune.tensor import Rng


def cifar_fixture(path):
    """Two hand-built records: label 3 then label 9, with known planar bytes."""
    rec0 = bytes([3]) + bytes([10] * 1024) + bytes([20] * 1024) + bytes([30] * 1024)
    planes = np.arange(3072, dtype=np.uint32) % 256
    rec1 = bytes([9]) + planes.astype(np.uint8).tobytes()
    path.write_bytes(rec0 + rec1)
    return planes.astype(np.uint8)


def test_cifar_fixture_values(tmp_path):
    planes = cifar_fixture(tmp_path / "b.bin")
    pixels, labels = read_cifar10_batch(tmp_path / "b.bin")
    assert labels.tolist() == [3, 9]
    assert pixels.shape == (2, 32, 32, 3)
    images = to_unit(pixels)
    assert images[0, 5, 7].tolist() == pytest.approx([10 / 255, 20 / 255, 30 / 255])
    # pixel (r, c), channel ch comes from planar offset ch*1024 + r*32 + c
    for r, c, ch in [(0, 0, 0), (31, 31, 2), (4, 17, 1)]:
        assert pixels[1, r, c, ch] == planes[ch * 1024 + r * 32 + c]
    assert images.dtype == np.float32 and images.max() <= 1.0


def test_cifar_bad_label_names_offset(tmp_path):
    raw = bytes([1]) + bytes(3072) + bytes([10]) + bytes(3072)
    (tmp_path / "bad.bin").write_bytes(raw)
    with pytest.raises(DataFormatError, match=f"offset {CIFAR_RECORD}"):
        read_cifar10_batch(tmp_path / "bad.bin")


def test_cifar_truncated_record(tmp_path):
    (tmp_path / "t.bin").write_bytes(bytes(CIFAR_RECORD + 100))
    with pytest.raises(DataFormatError, match="truncated.*offset 3073"):
        read_cifar10_batch(tmp_path / "t.bin")


def test_cifar_missing_file(tmp_path):
    with pytest.raises(DataFormatError, match="not found"):
        read_cifar10_batch(tmp_path / "nope.bin")


def test_cifar_round_trip_is_bit_exact(tmp_path):
    cifar_fixture(tmp_path / "a.bin")
    pixels, labels = read_cifar10_batch(tmp_path / "a.bin")
    write_cifar10_batch(tmp_path / "b.bin", to_bytes(to_unit(pixels)), labels)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_load_cifar10_directory(tmp_path):
    g = np.random.default_rng(0)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        write_cifar10_batch(tmp_path / name, g.integers(0, 256, (3, 32, 32, 3)), g.integers(0, 10, 3))
    train, test = load_cifar10(tmp_path)
    assert len(train) == 15 and len(test) == 3
    assert train.sample_shape == (32, 32, 3) and train.classes == 10


def mnist_fixture(tmp_path, count=3):
    g = np.random.default_rng(1)
    pixels = g.integers(0, 256, (count, 28, 28), dtype=np.uint8)
    labels = g.integers(0, 10, count)
    img, lab = tmp_path / "img", tmp_path / "lab"
    write_mnist_idx(img, lab, pixels, labels)
    return img, lab, pixels, labels


def test_idx_round_trip(tmp_path):
    img, lab, pixels, labels = mnist_fixture(tmp_path)
    assert len(img.read_bytes()) == 16 + 3 * 784
    ds = load_mnist_idx(img, lab)
    assert ds.sample_shape == (28, 28, 1)
    np.testing.assert_array_equal(to_bytes(ds.images)[..., 0], pixels)
    assert ds.labels.tolist() == labels.tolist()


def test_idx_swapped_files_report_magic(tmp_path):
    img, lab, _, _ = mnist_fixture(tmp_path)
    with pytest.raises(DataFormatError, match="magic"):
        load_mnist_idx(lab, img)


def test_idx_truncated_body(tmp_path):
    img, _, _, _ = mnist_fixture(tmp_path)
    img.write_bytes(img.read_bytes()[:-10])
    with pytest.raises(DataFormatError, match="promises 3 images"):
        read_idx_images(img)


def test_idx_count_mismatch(tmp_path):
    img, lab, _, _ = mnist_fixture(tmp_path)
    lab.write_bytes(struct.pack(">II", 0x801, 2) + bytes([1, 2]))
    with pytest.raises(DataFormatError, match="3 images.*2 labels"):
        load_mnist_idx(img, lab)


def test_synth_zero_spread_collapses_to_centers():
    ds = synth_blobs(3, 5, 4, 0.0, seed=2)
    for c in range(3):
        block = ds.images[ds.labels == c]
        assert np.all(block == block[0])
    assert len({tuple(ds.images[ds.labels == c][0].ravel()) for c in range(3)}) == 3


def test_synth_is_deterministic_and_seed_sensitive():
    a = synth_blobs(4, 10, 6, 0.1, seed=5)
    b = synth_blobs(4, 10, 6, 0.1, seed=5)
    c = synth_blobs(4, 10, 6, 0.1, seed=6)
    np.testing.assert_array_equal(a.images, b.images)
    assert not np.array_equal(a.images, c.images)


def test_synth_blobs_are_linearly_separable():
    ds = synth_blobs(4, 50, 16, 0.05, seed=0)
    net = Network(ds.sample_shape, [FLATTEN, dense(4), SOFTMAX], Rng(0), np.float64)
    for _ in range(50):
        backward(net, forward(net, ds.images.astype(np.float64))[0], ds.labels)
        sgd_step(net, 2.0)
    _, probs = forward(net, ds.images.astype(np.float64))
    assert np.mean(probs.argmax(axis=1) == ds.labels) >= 0.99


def test_batches_cover_every_sample_once():
    ds = synth_blobs(2, 5, 3, 0.1, seed=0)
    sizes, seen = [], []
    for x, y in batches(ds, BatchPlan(3, seed=1)):
        sizes.append(len(x))
        seen += [(tuple(row.ravel()), int(lab)) for row, lab in zip(x, y)]
    assert sizes == [3, 3, 3, 1]
    expected = [(tuple(row.ravel()), int(lab)) for row, lab in zip(ds.images, ds.labels)]
    assert Counter(seen) == Counter(expected)


def test_batch_order_changes_between_epochs():
    a = BatchPlan(4, seed=3, epoch=1).order(50)
    b = BatchPlan(4, seed=3, epoch=2).order(50)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, BatchPlan(4, seed=3, epoch=1).order(50))


def test_batch_size_zero_rejected():
    with pytest.raises(ValueError):
        BatchPlan(0, seed=0)


def test_split_is_disjoint_and_deterministic():
    ds = synth_blobs(2, 20, 3, 0.1, seed=0)
    train, test = ds.split(0.25, seed=4)
    assert len(train) == 30 and len(test) == 10
    again = ds.split(0.25, seed=4)
    np.testing.assert_array_equal(train.images, again[0].images)


def test_dataset_rejects_out_of_range_labels():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 1, 1), np.float32), np.array([0, 3]), 3)
