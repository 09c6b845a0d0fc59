from __future__ import annotations

import gzip
import struct

import numpy as np
import pytest

from hesplit.data_io import (
    DataFormatError, Dataset, load_bcw, load_csv, load_dataset, load_idx, load_mnist5k, minmax, one_hot, read_idx,
    synth,
)


def _write_idx(path, arr: np.ndarray, code: int = 0x08, gz: bool = False):
    head = struct.pack(">I", (code << 8) | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    blob = head + arr.astype(">u1").tobytes()
    path.write_bytes(gzip.compress(blob) if gz else blob)


def test_idx_round_trip(tmp_path):
    imgs = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    _write_idx(tmp_path / "i", imgs, gz=True)
    _write_idx(tmp_path / "l", np.array([3, 7], dtype=np.uint8))
    assert np.array_equal(read_idx(tmp_path / "i"), imgs)
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert ds.features.shape == (2, 9) and ds.features.max() == 17 / 255
    assert ds.labels.argmax(1).tolist() == [3, 7] and ds.n_classes == 10


def test_idx_errors_report_offsets(tmp_path):
    _write_idx(tmp_path / "i", np.zeros((4, 2, 2), dtype=np.uint8))
    blob = (tmp_path / "i").read_bytes()
    (tmp_path / "t").write_bytes(blob[:-3])
    with pytest.raises(DataFormatError) as exc:
        read_idx(tmp_path / "t")
    assert exc.value.offset == len(blob) - 3
    (tmp_path / "m").write_bytes(b"\x01\x02" + blob[2:])
    with pytest.raises(DataFormatError):
        read_idx(tmp_path / "m")
    with pytest.raises(DataFormatError):
        read_idx(tmp_path / "i", expected_magic=0x801)
    _write_idx(tmp_path / "l", np.zeros(3, dtype=np.uint8))
    with pytest.raises(DataFormatError):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_csv_loader(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text('a,b,color,label\n1,2,red,yes\n3,?,blue,no\n5,6,blue,no\n"7",8,red,yes\n')
    from hesplit.data_io import CsvSchema

    ds = load_csv(p, schema=CsvSchema("label", categorical=("color",)))
    assert ds.n_samples == 3 and ds.dropped_rows == 1
    assert np.allclose(ds.features[:, 0], [0, 2 / 3, 1])
    assert ds.features[:, 2].tolist() == [0.0, 1.0, 0.0]
    assert ds.labels.argmax(1).tolist() == [1, 0, 1]
    p.write_text("a,label\nx,1\n")
    with pytest.raises(DataFormatError):
        load_csv(p)
    p.write_text("a,label\n1\n")
    with pytest.raises(DataFormatError):
        load_csv(p)
    with pytest.raises(DataFormatError):
        load_csv(p, label_column="missing")


def test_bundled_breast_cancer_set():
    ds = load_bcw()
    assert (ds.n_samples, ds.n_features, ds.n_classes) == (683, 9, 2)
    assert ds.dropped_rows == 16
    assert ds.features.min() == 0.0 and ds.features.max() == 1.0
    assert int(ds.labels[:, 1].sum()) == 239


def test_bundled_digit_subset():
    ds = load_mnist5k(limit=100)
    assert ds.features.shape == (100, 784) and ds.n_classes == 10
    assert 0.0 <= ds.features.min() and ds.features.max() <= 1.0
    assert load_mnist5k().n_samples == 5000


def test_synth_is_deterministic_and_balanced():
    a, b = synth(101, 6, 3, 4), synth(101, 6, 3, 4)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    assert sorted(a.labels.sum(0).tolist()) == [33, 34, 34]
    assert not np.array_equal(a.features, synth(101, 6, 3, 5).features)
    with pytest.raises(ValueError):
        synth(2, 3, 3 + 1, 0)


def test_synth_separation_controls_difficulty():
    def nearest_mean_accuracy(ds):
        y = ds.labels.argmax(1)
        means = np.stack([ds.features[y == k].mean(0) for k in range(ds.n_classes)])
        d = ((ds.features[:, None, :] - means[None]) ** 2).sum(-1)
        return float(np.mean(d.argmin(1) == y))

    assert nearest_mean_accuracy(synth(400, 8, 2, 0, separation=8.0)) > 0.99
    assert nearest_mean_accuracy(synth(400, 8, 2, 0, separation=0.0)) < 0.7


def test_helpers_and_dataset_validation():
    assert one_hot([0, 2], 3).tolist() == [[1, 0, 0], [0, 0, 1]]
    with pytest.raises(ValueError):
        one_hot([3], 3)
    assert minmax(np.array([[1.0, 5.0], [3.0, 5.0]])).tolist() == [[0.0, 0.0], [1.0, 0.0]]
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1)), one_hot([0], 2), "x")
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan]]), one_hot([0], 2), "x")
    ds = synth(50, 3, 2, 0).with_split(0.2, seed=1)
    assert len(ds.test_idx) == 10 and len(ds.train_idx) == 40
    assert set(ds.test_idx) | set(ds.train_idx) == set(range(50))


def test_load_dataset_dispatch():
    assert load_dataset({"kind": "synth", "samples": 30, "features": 4}).features.shape == (30, 4)
    assert load_dataset({"kind": "bcw", "limit": 10}).n_samples == 10
    with pytest.raises(ValueError):
        load_dataset({"kind": "imagenet"})
