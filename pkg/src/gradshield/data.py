"""Datasets: IDX ingestion, synthetic fixtures and deterministic splits."""
from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxError(ValueError):
    """Malformed IDX input; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class BadMagicError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    split: str = "all"
    source_hash: str = ""

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if X.ndim != 2 or y.ndim != 2 or len(X) != len(y):
            raise ValueError(f"dataset shapes {X.shape} and {y.shape} are inconsistent")
        if X.size and (X.min() < 0.0 or X.max() > 1.0):
            raise ValueError("dataset inputs must lie in [0, 1]")
        check_one_hot(y)
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return len(self.X)

    @property
    def labels(self) -> np.ndarray:
        return self.y.argmax(axis=1)

    @property
    def num_classes(self) -> int:
        return self.y.shape[1]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], split or self.split, self.source_hash)


def check_one_hot(y: np.ndarray) -> None:
    y = np.asarray(y)
    if y.size and not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("labels must be one-hot rows")


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _read(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _header(data: bytes, magic: int, ndims: int, what: str) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(data) < 4:
        raise TruncatedFileError(f"{what}: file too short for magic number", len(data))
    (found,) = struct.unpack_from(">I", data, 0)
    if found != magic:
        raise BadMagicError(f"{what}: magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    if len(data) < need:
        raise TruncatedFileError(f"{what}: header ends early", len(data))
    return struct.unpack_from(f">{ndims}I", data, 4)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled by 1/255."""
    img = _read(images_path)
    lab = _read(labels_path)
    n, rows, cols = _header(img, IMAGE_MAGIC, 3, "images")
    (m,) = _header(lab, LABEL_MAGIC, 1, "labels")
    if n != m:
        raise CountMismatchError(f"{n} images but {m} labels", 4)
    body = n * rows * cols
    if len(img) < 16 + body:
        raise TruncatedFileError(f"images: expected {body} pixel bytes", len(img))
    if len(lab) < 8 + m:
        raise TruncatedFileError(f"labels: expected {m} label bytes", len(lab))
    pixels = np.frombuffer(img, dtype=np.uint8, count=body, offset=16).reshape(n, rows * cols)
    labels = np.frombuffer(lab, dtype=np.uint8, count=m, offset=8)
    if m and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise IdxError(f"label {labels[bad]} outside {num_classes} classes", 8 + bad)
    digest = hashlib.sha256(img + lab).hexdigest()
    return Dataset(pixels / 255.0, one_hot(labels, num_classes), "all", digest)


def write_idx(images_path, labels_path, pixels: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (N, rows, cols) and labels (N,) as uncompressed IDX."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes())


def make_synthetic(kind: str, n: int, seed: int, num_classes: int = 3) -> Dataset:
    """Deterministic 2-D fixtures in [0, 1]^2.

    ``blobs``: ``num_classes`` Gaussian clusters on a circle. ``xor-grid``:
    two-class checkerboard over a 4x4 grid. Labels are assigned round-robin,
    so class counts differ by at most one.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    if kind == "blobs":
        labels = np.arange(n) % num_classes
        angles = 2 * np.pi * np.arange(num_classes) / num_classes
        centers = 0.5 + 0.35 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        X = centers[labels] + rng.normal(0.0, 0.04, size=(n, 2))
        X = np.clip(X, 0.0, 1.0)
        return Dataset(X, one_hot(labels, num_classes), "all", f"synthetic:blobs:{n}:{seed}")
    if kind == "xor-grid":
        labels = np.arange(n) % 2
        X = np.empty((n, 2))
        cells = 4
        for i, lab in enumerate(labels):
            while True:
                p = rng.random(2)
                cx, cy = (p * cells).astype(int)
                if (cx + cy) % 2 == lab:
                    X[i] = p
                    break
        return Dataset(X, one_hot(labels, 2), "all", f"synthetic:xor-grid:{n}:{seed}")
    raise ValueError(f"unknown synthetic kind {kind!r}")


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle once with ``seed`` and cut into train/val/test by ``fractions``."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    parts = np.split(order, [n_train, n_train + n_val])
    return tuple(dataset.subset(np.sort(p), name) for p, name in zip(parts, ("train", "val", "test")))


def save_dataset(path, dataset: Dataset) -> str:
    return container.save(
        path,
        {"X": dataset.X, "y": dataset.y},
        {"kind": "dataset", "split": dataset.split, "source_hash": dataset.source_hash},
    )


def load_dataset(path) -> Dataset:
    tensors, meta = container.load(path)
    if meta.get("kind") != "dataset":
        raise container.ContainerError(f"{path}: not a dataset container")
    return Dataset(tensors["X"], tensors["y"], meta["split"], meta["source_hash"])


DEFAULT_MNIST_DIR = Path(os.environ.get("GRADSHIELD_DATA_DIR", Path(__file__).resolve().parents[2] / "data"))
MNIST_IMAGES = "mnist10k-images-idx3-ubyte.gz"
MNIST_LABELS = "mnist10k-labels-idx1-ubyte.gz"


def load_desk_mnist(data_dir=None, seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """The bundled 10k MNIST digits cut 5000 / 1000 / 4000 into train / val / test."""
    data_dir = Path(data_dir or DEFAULT_MNIST_DIR)
    full = load_idx(data_dir / MNIST_IMAGES, data_dir / MNIST_LABELS)
    return split(full, (0.5, 0.1, 0.4), seed)
