"""Dataset loading: IDX images, CSV tables, and seeded synthetic blobs.

Every loader returns features min-max normalised into [0, 1] and one-hot labels.
"""

from __future__ import annotations

import csv
import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

DATA_DIR = Path(__file__).resolve().parents[2] / "data"
BCW_FILE = "breast-cancer-wisconsin.csv"
MNIST5K_IMAGES = "mnist5k-images-idx3-ubyte.gz"
MNIST5K_LABELS = "mnist5k-labels-idx1-ubyte.gz"


class DataFormatError(ValueError):
    """Malformed input file; ``offset`` is the byte (or row) where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    provenance: str
    train_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    dropped_rows: int = 0

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("feature and label row counts differ")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.labels.size and not np.allclose(self.labels.sum(axis=1), 1.0):
            raise ValueError("label rows must be one-hot")
        if self.train_idx.size == 0 and self.test_idx.size == 0:
            object.__setattr__(self, "train_idx", np.arange(self.features.shape[0]))

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    def subset(self, n: int) -> Dataset:
        n = min(n, self.n_samples)
        return Dataset(self.features[:n], self.labels[:n], f"{self.provenance}[:{n}]")

    def with_split(self, test_fraction: float, seed: int = 0) -> Dataset:
        perm = np.random.default_rng(seed).permutation(self.n_samples)
        k = int(round(self.n_samples * test_fraction))
        return Dataset(
            self.features, self.labels, self.provenance,
            np.sort(perm[k:]), np.sort(perm[:k]), self.dropped_rows,
        )


def one_hot(labels: Sequence[int], classes: int | None = None) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    k = int(y.max()) + 1 if classes is None else classes
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    out = np.zeros((y.size, k))
    out[np.arange(y.size), y] = 1.0
    return out


def minmax(X: np.ndarray) -> np.ndarray:
    """Per-column min-max scaling; constant columns map to 0."""
    X = np.asarray(X, dtype=np.float64)
    lo = X.min(axis=0)
    span = X.max(axis=0) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (X - lo) / safe, 0.0)


# ---------------------------------------------------------------- IDX

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_bytes(path) -> bytes:
    data = Path(path).read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an IDX array (optionally gzipped); dimensions are big-endian u32."""
    data = _read_bytes(path)
    if len(data) < 4:
        raise DataFormatError(f"{path}: truncated header", len(data))
    magic = struct.unpack_from(">I", data, 0)[0]
    if expected_magic is not None and magic != expected_magic:
        raise DataFormatError(f"{path}: magic 0x{magic:08x} != 0x{expected_magic:08x}", 0)
    dtype_code, ndim = (magic >> 8) & 0xFF, magic & 0xFF
    if magic >> 16 != 0 or dtype_code not in _IDX_TYPES:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}", 0)
    head = 4 + 4 * ndim
    if len(data) < head:
        raise DataFormatError(f"{path}: truncated dimension block", len(data))
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    dtype = np.dtype(_IDX_TYPES[dtype_code])
    need = head + int(np.prod(dims)) * dtype.itemsize
    if len(data) < need:
        raise DataFormatError(f"{path}: truncated payload, expected {need} bytes, got {len(data)}", len(data))
    return np.frombuffer(data, dtype=dtype, count=int(np.prod(dims)), offset=head).reshape(dims)


def load_idx(images_path, labels_path, limit: int | None = None) -> Dataset:
    """Images scaled by 1/255 and flattened; labels one-hot over 10 digits."""
    images = read_idx(images_path, 0x00000803)
    labels = read_idx(labels_path, 0x00000801)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(X, one_hot(labels, 10), f"idx:{Path(images_path).name}")


def load_mnist5k(data_dir=None, limit: int | None = None) -> Dataset:
    d = Path(data_dir) if data_dir else DATA_DIR
    return load_idx(d / MNIST5K_IMAGES, d / MNIST5K_LABELS, limit)


# ---------------------------------------------------------------- CSV


@dataclass(frozen=True)
class CsvSchema:
    label_column: str
    drop_columns: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()
    missing: tuple[str, ...] = ("?", "")
    label_map: dict | None = None


BCW_SCHEMA = CsvSchema("class", drop_columns=("sample_id",), label_map={"2": 0, "4": 1})


def load_csv(path, label_column: str | None = None, schema: CsvSchema | None = None) -> Dataset:
    """RFC-4180 CSV with a header row; rows holding a missing marker are dropped."""
    schema = schema or CsvSchema(label_column or "label")
    if label_column is not None and label_column != schema.label_column:
        schema = CsvSchema(label_column, schema.drop_columns, schema.categorical, schema.missing, schema.label_map)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if not body:
        raise DataFormatError(f"{path}: no data rows")
    if schema.label_column not in header:
        raise DataFormatError(f"{path}: label column {schema.label_column!r} not in header")
    li = header.index(schema.label_column)
    keep = [i for i, h in enumerate(header) if i != li and h not in schema.drop_columns]
    cat = {header.index(c) for c in schema.categorical if c in header}
    feats, labels, dropped = [], [], 0
    cat_codes: dict[int, dict[str, int]] = {i: {} for i in cat}
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataFormatError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        if any(row[i].strip() in schema.missing for i in keep + [li]):
            dropped += 1
            continue
        vals = []
        for i in keep:
            cell = row[i].strip()
            if i in cat:
                vals.append(float(cat_codes[i].setdefault(cell, len(cat_codes[i]))))
                continue
            try:
                vals.append(float(cell))
            except ValueError:
                raise DataFormatError(f"{path}: non-numeric cell {cell!r} in column {header[i]!r}, row {r}") from None
        feats.append(vals)
        labels.append(row[li].strip())
    if not feats:
        raise DataFormatError(f"{path}: every row had missing values")
    if schema.label_map:
        unknown = set(labels) - set(schema.label_map)
        if unknown:
            raise DataFormatError(f"{path}: unknown labels {sorted(unknown)}")
        y = [schema.label_map[v] for v in labels]
        classes = len(set(schema.label_map.values()))
    else:
        names = sorted(set(labels))
        y = [names.index(v) for v in labels]
        classes = len(names)
    if dropped:
        log.info("%s: dropped %d rows with missing values", path, dropped)
    return Dataset(minmax(np.array(feats)), one_hot(y, classes), f"csv:{Path(path).name}", dropped_rows=dropped)


def load_bcw(data_dir=None) -> Dataset:
    d = Path(data_dir) if data_dir else DATA_DIR
    return load_csv(d / BCW_FILE, schema=BCW_SCHEMA)


# ---------------------------------------------------------------- synthetic


def synth(samples: int, features: int, classes: int, seed: int, separation: float = 4.0) -> Dataset:
    """Gaussian class blobs with unit spread; means ``separation`` sigmas apart.

    When ``classes <= features`` the means are orthonormal directions scaled
    by ``separation / sqrt(2)``, so every pair is exactly ``separation`` apart;
    otherwise they are random unit directions scaled by ``separation``. Each
    class gets an equal share of samples (up to one).
    """
    if classes < 1 or classes > samples:
        raise ValueError(f"need 1 <= classes <= samples, got {classes} classes for {samples} samples")
    rng = np.random.default_rng(seed)
    if classes <= features:
        q, _ = np.linalg.qr(rng.standard_normal((features, classes)))
        means = q.T * (separation / np.sqrt(2.0))
    else:
        dirs = rng.standard_normal((classes, features))
        means = dirs / np.linalg.norm(dirs, axis=1, keepdims=True) * separation
    y = np.arange(samples) % classes
    rng.shuffle(y)
    X = means[y] + rng.standard_normal((samples, features))
    return Dataset(minmax(X), one_hot(y, classes), f"synth:{samples}x{features}x{classes}@{seed}")


def load_dataset(spec: dict) -> Dataset:
    """Dispatch on a config ``data`` section."""
    kind = spec.get("kind", "synth")
    if kind == "bcw":
        ds = load_bcw(spec.get("dir"))
    elif kind == "mnist5k":
        ds = load_mnist5k(spec.get("dir"))
    elif kind == "idx":
        ds = load_idx(spec["images"], spec["labels"])
    elif kind == "csv":
        ds = load_csv(spec["path"], spec["label_column"])
    elif kind == "synth":
        ds = synth(spec.get("samples", 200), spec.get("features", 16), spec.get("classes", 2), spec.get("seed", 0),
                   spec.get("separation", 4.0))
    else:
        raise ValueError(f"unknown data kind {kind!r}")
    if spec.get("limit"):
        ds = ds.subset(int(spec["limit"]))
    return ds
