"""Dataset loading (raw-f32 ``VQDS`` files and headerless CSV) and bundled synthetic sets."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"VQDS"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")

SYNTHETIC = "synthetic"


class DataError(ValueError):
    """Unreadable, malformed or non-finite dataset."""


@dataclass
class Dataset:
    data: np.ndarray  # (N, features), float64
    source: str
    layout: str
    shape: tuple[int, ...]
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def write_raw_f32(path, array) -> None:
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim < 1:
        raise DataError("array must have at least one dimension")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_raw_f32(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise DataError(f"{path}: truncated header")
    magic, version, ndims = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if ndims < 1 or ndims > 8:
        raise DataError(f"{path}: unsupported rank {ndims}")
    off = _PREFIX.size + 8 * ndims
    if len(raw) < off:
        raise DataError(f"{path}: truncated shape")
    dims = struct.unpack_from(f"<{ndims}Q", raw, _PREFIX.size)
    count = int(np.prod(dims, dtype=object))
    if len(raw) != off + 4 * count:
        raise DataError(f"{path}: payload is {len(raw) - off} bytes, shape {dims} needs {4 * count}")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float64)


def read_csv(path) -> np.ndarray:
    try:
        arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    return arr


def load_dataset(path, standardize: bool = False) -> Dataset:
    """Load a dataset file, flattening trailing axes to one feature row per example."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(4)
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if head == MAGIC:
        arr, layout = read_raw_f32(path), "raw-f32"
    else:
        arr, layout = read_csv(path), "csv"
    return _finish(arr, str(path), layout, standardize)


def _finish(arr: np.ndarray, source: str, layout: str, standardize: bool) -> Dataset:
    shape = tuple(arr.shape)
    if arr.ndim == 1:
        arr = arr[:, None]
    flat = arr.reshape(arr.shape[0], -1)
    if flat.shape[0] < 1 or flat.shape[1] < 1:
        raise DataError(f"{source}: empty dataset")
    if not np.all(np.isfinite(flat)):
        raise DataError(f"{source}: non-finite values")
    ds = Dataset(flat, source, layout, shape)
    if standardize:
        ds = standardize_dataset(ds)
    return ds


def standardize_dataset(ds: Dataset) -> Dataset:
    mean = ds.data.mean(axis=0)
    std = ds.data.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return Dataset((ds.data - mean) / std, ds.source, ds.layout, ds.shape, mean, std)


def apply_normalization(x: np.ndarray, mean, std) -> np.ndarray:
    if mean is None:
        return x
    return (x - mean) / std


def synthetic_manifold(n: int = 4096, intrinsic_dim: int = 8, ambient_dim: int = 32, seed: int = 0) -> np.ndarray:
    """Points on a smooth ``intrinsic_dim``-dimensional manifold in ``ambient_dim`` space.

    Latent coordinates are uniform on [-1, 1]; a fixed random two-layer map
    with a sine nonlinearity embeds them. Columns are standardised.
    """
    rng = np.random.default_rng(seed)
    t = rng.uniform(-1.0, 1.0, size=(n, intrinsic_dim))
    a = rng.standard_normal((intrinsic_dim, ambient_dim)) / np.sqrt(intrinsic_dim)
    b = rng.standard_normal((ambient_dim, ambient_dim)) / np.sqrt(ambient_dim)
    x = np.sin(2.0 * t @ a) @ b
    return (x - x.mean(axis=0)) / x.std(axis=0)


def gaussian_blobs(centers, n_per: int, std: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Isotropic Gaussian clusters. Returns ``(points, labels)``."""
    centers = np.asarray(centers, dtype=np.float64)
    rng = np.random.default_rng(seed)
    k, d = centers.shape
    labels = np.repeat(np.arange(k), n_per)
    points = centers[labels] + std * rng.standard_normal((k * n_per, d))
    return points, labels


def synthetic_dataset(n: int = 4096, seed: int = 0) -> Dataset:
    arr = synthetic_manifold(n=n, seed=seed)
    return Dataset(arr, SYNTHETIC, "synthetic", arr.shape)
