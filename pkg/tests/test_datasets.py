import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from evoattack.datasets import (DatasetFormatError, LabeledDataset, denormalize, gen_synthetic, load_cifar10,
                                load_idx, normalize, split, write_idx)

FIXTURE_PIXELS = [
    [0, 255, 128, 1, 2, 3],
    [10, 20, 30, 40, 50, 254],
]


@pytest.fixture
def idx_pair(tmp_path):
    # two 2x3 images, labels 3 and 7
    images = struct.pack(">4I", 0x803, 2, 2, 3) + bytes(sum(FIXTURE_PIXELS, []))
    labels = struct.pack(">2I", 0x801, 2) + bytes([3, 7])
    (tmp_path / "img").write_bytes(images)
    (tmp_path / "lbl").write_bytes(labels)
    return tmp_path / "img", tmp_path / "lbl"


def test_pixel_scaling():
    assert normalize(0) == 0.0
    assert normalize(255) == 1.0
    assert normalize(128) == pytest.approx(0.50196, abs=5e-6)


def test_normalize_roundtrip_all_bytes():
    raw = np.arange(256)
    assert np.array_equal(denormalize(normalize(raw)), raw)
    assert np.max(np.abs(normalize(denormalize(normalize(raw))) - normalize(raw))) <= 1e-12


def test_load_idx_golden(idx_pair):
    ds = load_idx(*idx_pair)
    assert ds.shape == (2, 3, 1)
    assert ds.labels.tolist() == [3, 7]
    assert ds.num_classes == 8
    expected = np.array(FIXTURE_PIXELS) / 255.0
    assert np.array_equal(ds.images, expected)


def test_idx_bad_magic(idx_pair, tmp_path):
    img, lbl = idx_pair
    buf = bytearray(img.read_bytes())
    buf[3] = 0x01
    img.write_bytes(bytes(buf))
    with pytest.raises(DatasetFormatError) as err:
        load_idx(img, lbl)
    assert err.value.offset == 0


def test_idx_truncated_payload(idx_pair):
    img, lbl = idx_pair
    img.write_bytes(img.read_bytes()[:-1])
    with pytest.raises(DatasetFormatError, match="truncated") as err:
        load_idx(img, lbl)
    assert err.value.offset == 16 + 11


def test_idx_count_mismatch(idx_pair):
    img, lbl = idx_pair
    lbl.write_bytes(struct.pack(">2I", 0x801, 3) + bytes([3, 7, 1]))
    with pytest.raises(DatasetFormatError, match="count") as err:
        load_idx(img, lbl)
    assert err.value.offset == 4


def test_idx_write_read_roundtrip(tmp_path):
    ds = gen_synthetic(3, 4, seed=2)
    write_idx(ds, tmp_path / "i", tmp_path / "l")
    back = load_idx(tmp_path / "i", tmp_path / "l")
    assert np.array_equal(back.labels, ds.labels)
    assert np.max(np.abs(back.images - ds.images)) <= 0.5 / 255 + 1e-12


def test_idx_colour_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    ds = LabeledDataset(rng.integers(0, 256, (3, 12)) / 255.0, [0, 1, 1], 2, (2, 2, 3))
    write_idx(ds, tmp_path / "i", tmp_path / "l")
    back = load_idx(tmp_path / "i", tmp_path / "l")
    assert back.shape == (2, 2, 3)
    assert np.array_equal(back.images, ds.images)


def _cifar_record(label, planar):
    return bytes([label]) + bytes(planar)


def test_cifar_planar_to_interleaved(tmp_path):
    r = np.full(1024, 10, dtype=np.uint8)
    g = np.full(1024, 20, dtype=np.uint8)
    b = np.full(1024, 30, dtype=np.uint8)
    r[0] = 200  # pixel (0, 0) red channel
    b[33] = 100  # pixel (1, 1) blue channel
    path = tmp_path / "batch.bin"
    path.write_bytes(_cifar_record(4, np.concatenate([r, g, b])))
    ds = load_cifar10([path])
    assert ds.shape == (32, 32, 3) and ds.num_classes == 10
    img = ds.images[0].reshape(32, 32, 3)
    assert img[0, 0].tolist() == pytest.approx([200 / 255, 20 / 255, 30 / 255])
    assert img[1, 1].tolist() == pytest.approx([10 / 255, 20 / 255, 100 / 255])
    assert ds.labels.tolist() == [4]


def test_cifar_full_batch_count(tmp_path):
    rng = np.random.default_rng(1)
    payload = rng.integers(0, 256, size=(10000, 3073), dtype=np.uint8)
    payload[:, 0] %= 10
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(payload.tobytes())
    ds = load_cifar10(path)
    assert len(ds) == 10000
    assert ds.images.shape == (10000, 3072)


def test_cifar_empty_file(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    assert len(load_cifar10([path])) == 0


def test_cifar_truncated(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(bytes(3074))
    with pytest.raises(DatasetFormatError, match="multiple") as err:
        load_cifar10([path])
    assert err.value.offset == 3073


def test_cifar_bad_label(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(bytes(3073) + bytes([12]) + bytes(3072))
    with pytest.raises(DatasetFormatError, match="label") as err:
        load_cifar10([path])
    assert err.value.offset == 3073


def test_synthetic_deterministic():
    a, b = gen_synthetic(2, 5, seed=1), gen_synthetic(2, 5, seed=1)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, gen_synthetic(2, 5, seed=2).images)


def test_synthetic_counts_and_range():
    ds = gen_synthetic(3, 10, seed=1)
    assert len(ds) == 30
    assert np.bincount(ds.labels).tolist() == [10, 10, 10]
    assert ds.shape == (8, 8, 1)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_synthetic_rejects_one_class():
    with pytest.raises(ValueError):
        gen_synthetic(1, 5)


def test_split_sizes():
    ds = gen_synthetic(10, 10, seed=0)
    tr, te = split(ds, 0.8, seed=3)
    assert (len(tr), len(te)) == (80, 20)


def test_split_empty():
    ds = LabeledDataset(np.zeros((0, 64)), [], 2, (8, 8, 1))
    tr, te = split(ds, 0.8, seed=0)
    assert len(tr) == len(te) == 0


def test_split_deterministic():
    ds = gen_synthetic(4, 7, seed=0)
    a, b = split(ds, 0.6, seed=9), split(ds, 0.6, seed=9)
    for x, y in zip(a, b):
        assert np.array_equal(x.images, y.images)


@given(n=st.integers(0, 60), f=st.floats(0.01, 0.99), seed=st.integers(0, 2**31))
def test_split_is_partition(n, f, seed):
    images = np.linspace(0, 1, n)[:, None] * np.ones((1, 4))
    ds = LabeledDataset(images, np.arange(n) % 2, 2, (2, 2, 1))
    tr, te = split(ds, f, seed)
    assert len(tr) == int(np.floor(n * f))
    merged = sorted(tr.images[:, 0].tolist() + te.images[:, 0].tolist())
    assert merged == sorted(images[:, 0].tolist())


def test_dataset_invariants():
    with pytest.raises(ValueError):
        LabeledDataset(np.full((1, 4), 1.5), [0], 2, (2, 2, 1))
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((1, 4)), [2], 2, (2, 2, 1))
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 4)), [0], 2, (2, 2, 1))
