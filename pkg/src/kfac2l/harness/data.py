"""Dataset loading: IDX (MNIST-format) binaries, CSV tables and seeded synthetic sets."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..network import CROSS_ENTROPY
from ..rng import STREAM_DATA, generator

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SOURCES = ("idx", "csv", "synthetic-regression", "synthetic-autoencoder", "synthetic-classification")


class DatasetError(ValueError):
    pass


class BadMagic(DatasetError):
    pass


class TruncatedFile(DatasetError):
    pass


class DimMismatch(DatasetError):
    pass


def read_idx(path, expected_magic: Optional[int] = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an array of its declared shape."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: {len(raw)} bytes, too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise BadMagic(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise BadMagic(f"{path}: magic 0x{magic:08x} is not an unsigned-byte IDX file")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if ndim == 0 or len(raw) < header:
        raise TruncatedFile(f"{path}: header declares {ndim} dimensions but the file ends early")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise TruncatedFile(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    if len(raw) - header > count:
        raise DimMismatch(f"{path}: {len(raw) - header - count} bytes beyond the declared dimensions {dims}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Images flattened per sample and scaled to [0, 1]; labels as integers when given."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    x = images.reshape(images.shape[0], -1).astype(float) / 255.0
    if labels_path is None:
        return x, None
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if labels.ndim != 1 or labels.shape[0] != x.shape[0]:
        raise DimMismatch(f"{labels.shape[0]} labels for {x.shape[0]} images")
    return x, labels.astype(int)


def load_csv(path, n_targets: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Header row, comma separated; the last ``n_targets`` columns are targets."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TruncatedFile(f"{path}: empty CSV")
        rows = [r for r in reader if r]
    width = len(header)
    for k, r in enumerate(rows):
        if len(r) != width:
            raise DimMismatch(f"{path}: row {k + 2} has {len(r)} fields, header has {width}")
    data = np.array(rows, dtype=float).reshape(len(rows), width)
    if not 0 <= n_targets < width:
        raise DimMismatch(f"{path}: cannot take {n_targets} target columns out of {width}")
    if n_targets == 0:
        return data, data
    return data[:, :-n_targets], data[:, -n_targets:]


def synthetic_regression(n: int, d_in: int, d_out: int, seed: int, noise: float = 0.1):
    """``y = tanh(x W1) W2 + noise``, ``x ~ N(0, I)``, with random hidden width 2*d_in."""
    rng = generator(seed, STREAM_DATA)
    W1 = rng.standard_normal((d_in, 2 * d_in)) / np.sqrt(d_in)
    W2 = rng.standard_normal((2 * d_in, d_out)) / np.sqrt(2 * d_in)
    x = rng.standard_normal((n, d_in))
    y = np.tanh(x @ W1) @ W2 + noise * rng.standard_normal((n, d_out))
    return x, y


def synthetic_autoencoder(n: int, d: int, seed: int, latent: int = 3):
    """Points on a smooth ``latent``-dimensional manifold in [0, 1]^d: ``x = sigmoid(z M)``."""
    rng = generator(seed, STREAM_DATA)
    M = 2.0 * rng.standard_normal((latent, d))
    z = rng.standard_normal((n, latent))
    x = 1.0 / (1.0 + np.exp(-(z @ M)))
    return x, x.copy()


def synthetic_classification(n: int, d: int, n_classes: int, seed: int, separation: float = 0.5):
    """Gaussian mixture: class means ``separation * N(0, I)``, unit within-class noise."""
    rng = generator(seed, STREAM_DATA)
    means = separation * rng.standard_normal((n_classes, d))
    labels = rng.integers(0, n_classes, size=n)
    x = means[labels] + rng.standard_normal((n, d))
    return x, labels


@dataclass(frozen=True)
class LoadedData:
    inputs: np.ndarray
    targets: np.ndarray


def load_dataset(spec, in_size: int, out_size: int, loss: str, seed: int, base_dir: Path = Path(".")) -> LoadedData:
    """Materialize the dataset described by a :class:`~kfac2l.harness.config.DataSpec`."""
    src = spec.source
    n = spec.n_samples
    if src == "idx":
        x, labels = load_idx(base_dir / spec.path, (base_dir / spec.labels_path) if spec.labels_path else None)
        y = x if spec.autoencoder or labels is None else labels
    elif src == "csv":
        x, y = load_csv(base_dir / spec.path, 0 if spec.autoencoder else spec.n_targets)
        if spec.autoencoder:
            y = x
        elif loss == CROSS_ENTROPY:
            y = y[:, 0].astype(int)
    elif src == "synthetic-regression":
        x, y = synthetic_regression(n or 256, in_size, out_size, seed, spec.noise)
    elif src == "synthetic-autoencoder":
        x, y = synthetic_autoencoder(n or 256, in_size, seed, spec.latent)
    elif src == "synthetic-classification":
        x, y = synthetic_classification(n or 256, in_size, out_size, seed, spec.separation)
    else:
        raise DatasetError(f"unknown dataset source {src!r}")
    if n:
        x, y = x[:n], y[:n]
    if x.shape[1] != in_size:
        raise DimMismatch(f"dataset has {x.shape[1]} input features, the model expects {in_size}")
    if loss != CROSS_ENTROPY and np.ndim(y) == 2 and y.shape[1] != out_size:
        raise DimMismatch(f"dataset has {y.shape[1]} target columns, the model outputs {out_size}")
    return LoadedData(np.ascontiguousarray(x, dtype=float), np.ascontiguousarray(y))
