"""Desk-scale datasets: Gaussian blobs, two spirals, and IDX image files."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..rng import STREAM_DATA, make_rng

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class IDXFormatError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    feature_mean: np.ndarray
    feature_std: np.ndarray

    def __len__(self):
        return int(self.y.shape[0])

    def raw(self):
        """Undo the standardization."""
        return self.X * self.feature_std + self.feature_mean


@dataclass
class DatasetSpec:
    kind: str = "blobs"
    classes: int = 4
    dim: int = 20
    n: int = 2000
    noise: float = 1.0
    seed: int = 0
    split: float = 0.8
    images_path: str | None = None
    labels_path: str | None = None
    take_n: int | None = None

    def validate(self):
        if self.kind not in ("blobs", "spirals", "idx_files"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if not 0.0 < self.split < 1.0:
            raise ValueError(f"split must lie in (0, 1), got {self.split}")
        if self.kind == "idx_files" and not (self.images_path and self.labels_path):
            raise ValueError("idx_files needs images_path and labels_path")
        if self.kind != "idx_files" and self.n < 2:
            raise ValueError(f"n must be >= 2, got {self.n}")
        return self


def read_idx(path):
    """Parse one IDX file (big-endian) into an ndarray."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise IDXFormatError(f"{path}: truncated magic at offset 0")
    if buf[0] != 0 or buf[1] != 0:
        raise IDXFormatError(f"{path}: bad magic bytes at offset 0 (expected two zero bytes)")
    code, ndim = buf[2], buf[3]
    if code not in _IDX_DTYPES:
        raise IDXFormatError(f"{path}: unknown data type code 0x{code:02x} at offset 2")
    if ndim < 1:
        raise IDXFormatError(f"{path}: zero dimensions at offset 3")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IDXFormatError(f"{path}: truncated dimension header at offset 4")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    dtype = _IDX_DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(buf) - header != expected:
        raise IDXFormatError(
            f"{path}: payload at offset {header} has {len(buf) - header} bytes, "
            f"dims {dims} need {expected}")
    return np.frombuffer(buf, dtype=dtype, offset=header).reshape(dims)


def write_idx(path, array):
    """Write ``array`` as an IDX file (used for fixtures and round-trips)."""
    array = np.asarray(array)
    code = {v.newbyteorder("="): k for k, v in _IDX_DTYPES.items()}[array.dtype.newbyteorder("=")]
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.astype(_IDX_DTYPES[code]).tobytes())


def _blobs(spec):
    rng = make_rng(spec.seed, STREAM_DATA)
    centers = rng.normal(0.0, 1.0, size=(spec.classes, spec.dim)) * np.sqrt(spec.dim) / 2.0
    y = np.arange(spec.n) % spec.classes
    y = y[rng.permutation(spec.n)]
    X = centers[y] + spec.noise * rng.normal(size=(spec.n, spec.dim))
    return X, y, spec.classes


def _spirals(spec):
    rng = make_rng(spec.seed, STREAM_DATA)
    y = np.arange(spec.n) % 2
    y = y[rng.permutation(spec.n)]
    t = rng.uniform(0.25, 1.0, size=spec.n) * 3.0 * np.pi
    sign = np.where(y == 0, 1.0, -1.0)
    X = np.stack([sign * t * np.cos(t), sign * t * np.sin(t)], axis=1) / (3.0 * np.pi)
    X = X + spec.noise * rng.normal(size=X.shape)
    return X, y, 2


def _idx(spec):
    images = read_idx(spec.images_path)
    labels = read_idx(spec.labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IDXFormatError(
            f"{spec.images_path} has {images.shape[0]} items, labels have {labels.shape[0]}")
    n = images.shape[0] if spec.take_n is None else spec.take_n
    if n > images.shape[0]:
        raise ValueError(f"take_n={n} exceeds the {images.shape[0]} items in {spec.images_path}")
    X = images[:n].reshape(n, -1).astype(np.float64)
    y = labels[:n].astype(np.int64).reshape(-1)
    return X, y, int(y.max()) + 1


def load_dataset(spec):
    """Deterministic (train, test) split with train-split standardization."""
    if isinstance(spec, dict):
        spec = DatasetSpec(**spec)
    spec.validate()
    X, y, k = {"blobs": _blobs, "spirals": _spirals, "idx_files": _idx}[spec.kind](spec)
    n_train = int(round(spec.split * len(y)))
    if n_train < 1 or n_train >= len(y):
        raise ValueError(f"split {spec.split} leaves an empty side for {len(y)} samples")
    Xtr, Xte = X[:n_train], X[n_train:]
    mean = Xtr.mean(axis=0)
    std = Xtr.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    mk = lambda A, b: Dataset((A - mean) / std, np.asarray(b, dtype=np.int64), k, mean, std)
    return mk(Xtr, y[:n_train]), mk(Xte, y[n_train:])
