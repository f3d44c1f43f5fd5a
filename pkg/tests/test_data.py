import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rab2def.data import (
    CIFAR_RECORD,
    ClientProfile,
    Dataset,
    load_cifar_bin,
    load_idx,
    partition,
    square_shape,
    synth_blobs,
    validation_split,
)
from rab2def.errors import FormatError, InsufficientDataError


def idx_bytes(images, labels):
    n, h, w = images.shape
    img = struct.pack(">IIII", 0x803, n, h, w) + images.astype(np.uint8).tobytes()
    lab = struct.pack(">II", 0x801, n) + np.asarray(labels, dtype=np.uint8).tobytes()
    return img, lab


def test_idx_roundtrip():
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(5, 4, 3))
    img, lab = idx_bytes(images, [0, 1, 2, 1, 0])
    ds = load_idx(img, lab)
    assert ds.image_shape == (4, 3, 1) and ds.classes == 3
    assert np.allclose(ds.features, images.reshape(5, -1) / 255.0)
    assert ds.labels.tolist() == [0, 1, 2, 1, 0]


def test_idx_errors():
    img, lab = idx_bytes(np.zeros((2, 2, 2)), [0, 1])
    with pytest.raises(FormatError):
        load_idx(b"\x00\x00\x08\x01" + img[4:], lab)  # wrong magic
    with pytest.raises(FormatError):
        load_idx(img[:-1], lab)  # truncated pixels
    with pytest.raises(FormatError):
        load_idx(img, struct.pack(">II", 0x801, 3) + b"\x00\x01\x00")  # count mismatch
    with pytest.raises(FormatError):
        load_idx(img[:10], lab)  # truncated header
    with pytest.raises(FormatError):
        load_idx(img, lab, classes=1)


def test_cifar_channel_order():
    rec = bytearray(CIFAR_RECORD)
    rec[0] = 7
    rec[1] = 255  # red plane, pixel (0, 0)
    rec[1 + 1024 + 33] = 255  # green plane, pixel (1, 1)
    ds = load_cifar_bin(bytes(rec) * 2)
    img = ds.features[0].reshape(32, 32, 3)
    assert len(ds) == 2 and ds.labels[0] == 7 and ds.image_shape == (32, 32, 3)
    assert img[0, 0, 0] == 1.0 and img[1, 1, 1] == 1.0 and img.sum() == 2.0


def test_cifar_errors():
    with pytest.raises(FormatError):
        load_cifar_bin(b"\x00" * (CIFAR_RECORD + 1))
    with pytest.raises(FormatError):
        load_cifar_bin(b"\x0b" + b"\x00" * (CIFAR_RECORD - 1))


def test_square_shape():
    assert square_shape(784) == (28, 28, 1)
    assert square_shape(20) == (4, 5, 1)
    assert square_shape(7) == (1, 7, 1)


def test_synth_blobs_deterministic_and_bounded():
    a = synth_blobs(4, 20, 10, 0.3, seed=3)
    b = synth_blobs(4, 20, 10, 0.3, seed=3)
    assert np.array_equal(a.features, b.features)
    assert a.features.min() >= 0 and a.features.max() <= 1
    assert np.bincount(a.labels).tolist() == [10] * 4


@pytest.mark.parametrize("n,val,rest", [(40000, 8000, 32000), (10000, 2000, 8000)])
def test_validation_split_sizes(n, val, rest):
    labels = np.arange(n) % 10
    ds = Dataset(np.zeros((n, 1)), labels, 10, (1, 1, 1))
    v, t = validation_split(ds, 0.2, seed=0)
    assert (len(v), len(t)) == (val, rest)
    assert np.bincount(v.labels).tolist() == [val // 10] * 10


def test_validation_split_odd_sizes_and_disjointness():
    ds = Dataset(np.arange(37.0)[:, None], np.arange(37) % 3, 3, (1, 1, 1))
    v, t = validation_split(ds, 0.3, seed=5)
    assert len(v) == 11 and len(t) == 26
    assert set(v.features[:, 0]).isdisjoint(t.features[:, 0])


@settings(max_examples=40, deadline=None)
@given(
    n_clients=st.integers(2, 12),
    n_poor=st.integers(0, 3),
    skew=st.floats(0.0, 1.0),
    seed=st.integers(0, 10**6),
)
def test_partition_conserves_samples(n_clients, n_poor, skew, seed):
    n_poor = min(n_poor, n_clients // 3)
    data = Dataset(np.arange(400.0)[:, None], np.arange(400) % 4, 4, (1, 1, 1))
    shards = partition(data, n_clients, n_poor, skew, seed)
    ids = np.concatenate([ds.features[:, 0] for ds, _ in shards])
    assert sorted(ids.tolist()) == list(range(400))
    assert sum(p.role == "poor" for _, p in shards) == n_poor
    sizes = [len(ds) for ds, _ in shards]
    assert max(sizes) - min(sizes) <= 1
    for ds, p in shards:
        if p.role == "poor":
            dom = np.isin(ds.labels, p.dominant_classes).sum()
            assert dom >= np.ceil(skew * len(ds)) - 1e-9


def test_partition_needs_enough_samples():
    data = Dataset(np.zeros((3, 1)), np.array([0, 1, 0]), 2, (1, 1, 1))
    with pytest.raises(InsufficientDataError):
        partition(data, 5, 0, 0.8, 0)


def test_profile_consistency():
    with pytest.raises(ValueError):
        ClientProfile(0, "adversarial")
    with pytest.raises(ValueError):
        ClientProfile(0, "regular", attack="backdoor")
