"""Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, synthetic lines."""
from __future__ import annotations

import gzip
import os
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGE_OFFSET = 16
IDX_LABEL_OFFSET = 8

MNIST_MEAN, MNIST_STD = (0.1307,), (0.3081,)
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, c, h, w) float32, normalized
    labels: np.ndarray  # (n,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int | None) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.num_classes, self.split)

    @property
    def shape(self) -> tuple:
        return self.images.shape[1:]


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    """Scale uint8 images to [0, 1] and standardize per channel."""
    x = images.astype(np.float32) / 255.0
    m = np.asarray(mean, np.float32)[None, :, None, None]
    s = np.asarray(std, np.float32)[None, :, None, None]
    return (x - m) / s


def _read(path: str) -> bytes:
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _idx_header(buf: bytes, magic: int, ndims: int, path: str) -> tuple:
    got = int.from_bytes(buf[:4], "big") if len(buf) >= 4 else None
    if got != magic:
        got_s = "none" if got is None else f"0x{got:08x}"
        raise DataFormatError(f"{path}: expected IDX magic 0x{magic:08x}, got {got_s}")
    dims = tuple(int.from_bytes(buf[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndims))
    return dims


def load_idx(images_path: str, labels_path: str, limit: int | None = None,
             mean=MNIST_MEAN, std=MNIST_STD, split: str = "train") -> Dataset:
    """Read an IDX image/label pair (optionally gzipped) into a normalized Dataset."""
    ib = _read(images_path)
    lb = _read(labels_path)
    n_img, rows, cols = _idx_header(ib, IDX_IMAGES_MAGIC, 3, images_path)
    (n_lab,) = _idx_header(lb, IDX_LABELS_MAGIC, 1, labels_path)
    if n_img != n_lab:
        raise DataFormatError(f"{images_path} holds {n_img} images but {labels_path} holds {n_lab} labels")
    if len(ib) < IDX_IMAGE_OFFSET + n_img * rows * cols or len(lb) < IDX_LABEL_OFFSET + n_lab:
        raise DataFormatError("IDX payload shorter than its header declares")
    n = n_img if limit is None else min(limit, n_img)
    pix = np.frombuffer(ib, np.uint8, n * rows * cols, IDX_IMAGE_OFFSET).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lb, np.uint8, n, IDX_LABEL_OFFSET).astype(np.int64)
    return Dataset(normalize(pix, mean, std), labels, 10, split)


def _find(directory: str, stem: str) -> str:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        p = os.path.join(directory, name)
        if os.path.exists(p):
            return p
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist_dir(directory: str, n_train: int | None = None, n_test: int | None = None):
    """Standard MNIST file names from ``directory``; returns (train, test)."""
    train = load_idx(_find(directory, "train-images-idx3-ubyte"),
                     _find(directory, "train-labels-idx1-ubyte"), n_train, split="train")
    test = load_idx(_find(directory, "t10k-images-idx3-ubyte"),
                    _find(directory, "t10k-labels-idx1-ubyte"), n_test, split="test")
    return train, test


def load_cifar10_bin(paths, limit: int | None = None, mean=CIFAR_MEAN, std=CIFAR_STD,
                     split: str = "train") -> Dataset:
    """Read one or more CIFAR-10 binary batch files."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    chunks = []
    for p in paths:
        buf = _read(str(p))
        if len(buf) % CIFAR_RECORD:
            raise DataFormatError(f"{p}: length {len(buf)} is not a multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(buf, np.uint8).reshape(-1, CIFAR_RECORD))
    rec = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    if limit is not None:
        rec = rec[:limit]
    labels = rec[:, 0].astype(np.int64)
    pix = rec[:, 1:].reshape(-1, 3, 32, 32)
    return Dataset(normalize(pix, mean, std), labels, 10, split)


def load_cifar10_dir(directory: str, n_train: int | None = None, n_test: int | None = None):
    train_files = sorted(os.path.join(directory, f) for f in os.listdir(directory)
                         if f.startswith("data_batch") and f.endswith(".bin"))
    if not train_files:
        raise FileNotFoundError(f"no data_batch_*.bin in {directory}")
    train = load_cifar10_bin(train_files, n_train, split="train")
    test = load_cifar10_bin(os.path.join(directory, "test_batch.bin"), n_test, split="test")
    return train, test


def draw_line(angle_deg: float, size: int = 16, length: float = 11.0, width: float = 1.0,
              center=(0.0, 0.0)) -> np.ndarray:
    """Anti-aliased segment image; angle measured counterclockwise from +x, rows grow down."""
    c = (size - 1) / 2.0
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    px = cols - c - center[0]
    py = -(rows - c - center[1])
    a = np.deg2rad(angle_deg)
    d = np.array([np.cos(a), np.sin(a)])
    along = px * d[0] + py * d[1]
    across = np.abs(-px * d[1] + py * d[0])
    # distance to the segment, with linear falloff over one pixel
    excess = np.maximum(np.abs(along) - length / 2.0, 0.0)
    dist = np.hypot(across, excess)
    return np.clip(1.0 - (dist - width / 2.0), 0.0, 1.0)


def synth_angles(seed: int, n: int, num_buckets: int = 4, size: int = 16, split: str = "train") -> Dataset:
    """Grayscale images each holding one line; the label is the angle bucket.

    Bucket ``b`` covers angles within half a sector of ``b * 180 / num_buckets``
    (mod 180).
    """
    if num_buckets < 1 or 180 % num_buckets:
        raise ValueError(f"num_buckets must divide 180, got {num_buckets}")
    rng = np.random.default_rng(seed)
    sector = 180.0 / num_buckets
    angles = rng.uniform(0.0, 180.0, n)
    offsets = rng.uniform(-2.0, 2.0, (n, 2))
    lengths = rng.uniform(8.0, 12.0, n)
    noise = rng.normal(0.0, 0.05, (n, size, size))
    labels = (np.floor((angles + sector / 2) / sector).astype(np.int64)) % num_buckets
    imgs = np.stack([draw_line(a, size, ln, 1.0, off) for a, ln, off in zip(angles, lengths, offsets)])
    imgs = imgs + noise
    mean, std = 0.1, 0.3
    x = ((imgs - mean) / std).astype(np.float32)[:, None]
    return Dataset(x, labels, num_buckets, split)
