"""Synthetic dataset determinism and IDX parsing."""

import struct

import numpy as np
import pytest

from microdarts.data import (
    Dataset,
    load_idx_array,
    load_idx_dataset,
    synthetic_dataset,
)


def write_idx_images(path, images):
    n, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x0803, n, h, w))
        fh.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", 0x0801, len(labels)))
        fh.write(labels.astype(np.uint8).tobytes())


def test_synthetic_shapes_and_classes():
    ds = synthetic_dataset(n=64, size=16, seed=0)
    assert ds.x.shape == (64, 1, 16, 16)
    assert ds.y.shape == (64,)
    assert set(np.unique(ds.y)) <= {0, 1}
    assert ds.classes == 2


def test_synthetic_deterministic():
    a = synthetic_dataset(n=32, seed=7)
    b = synthetic_dataset(n=32, seed=7)
    assert (a.x == b.x).all() and (a.y == b.y).all()
    c = synthetic_dataset(n=32, seed=8)
    assert not (a.x == c.x).all()


def test_synthetic_crosses_have_more_mass():
    ds = synthetic_dataset(n=200, noise=0.0, seed=1)
    bars = ds.x[ds.y == 0].sum(axis=(1, 2, 3)).mean()
    crosses = ds.x[ds.y == 1].sum(axis=(1, 2, 3)).mean()
    assert crosses > bars * 1.5


def test_split_disjoint_and_sized():
    ds = synthetic_dataset(n=100, seed=2)
    train, val = ds.split(0.5)
    assert len(train) == 50 and len(val) == 50
    assert (np.concatenate([train.y, val.y]) == ds.y).all()
    with pytest.raises(ValueError):
        ds.split(0.0)


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    images = rng.integers(0, 256, (10, 8, 8)).astype(np.uint8)
    labels = rng.integers(0, 2, 10).astype(np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx_images(ip, images)
    write_idx_labels(lp, labels)

    assert (load_idx_array(ip) == images).all()
    assert (load_idx_array(lp) == labels).all()
    ds = load_idx_dataset(ip, lp)
    assert ds.x.shape == (10, 1, 8, 8)
    assert ds.x.max() <= 1.0
    assert (ds.y == labels).all()


def test_idx_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(struct.pack(">II", 0x1234, 3))
    with pytest.raises(ValueError, match="magic"):
        load_idx_array(p)


def test_idx_truncated_payload_rejected(tmp_path):
    p = tmp_path / "short.idx"
    with open(p, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x0803, 4, 8, 8))
        fh.write(b"\x00" * 10)
    with pytest.raises(ValueError, match="payload"):
        load_idx_array(p)


def test_idx_count_mismatch_rejected(tmp_path):
    rng = np.random.default_rng(4)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx_images(ip, rng.integers(0, 256, (5, 4, 4)).astype(np.uint8))
    write_idx_labels(lp, rng.integers(0, 2, 6).astype(np.uint8))
    with pytest.raises(ValueError, match="count"):
        load_idx_dataset(ip, lp)


def test_dataset_shape_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((4, 8, 8)), np.zeros(4, dtype=np.int64))
