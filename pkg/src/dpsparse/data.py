"""Dataset loading: MNIST IDX, CIFAR-10 binary batches, synthetic blobs.

Loaders read local files only and validate formats byte-precisely, reporting
offsets on corruption. Gzipped inputs are detected by magic and decompressed
on the fly, so the repository can ship compressed data. Pixels land in [0,1];
an optional recorded normalization can be applied afterwards and inverted.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, DataFormatError

_BLOBS_STREAM = 0xB10B
_BATCH_STREAM = 0xBA7C

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class Dataset:
    """Immutable labeled split; images float64, labels int64."""

    images: np.ndarray          # (N, C, H, W) or (N, dim), values in [0,1] raw
    labels: np.ndarray          # (N,)
    split: str                  # train | prune | test
    num_classes: int
    norm_mean: float = None     # recorded normalization, None = raw
    norm_std: float = None

    def __post_init__(self):
        if len(self.images) == 0:
            raise ConfigurationError("dataset must be nonempty")
        if len(self.images) != len(self.labels):
            raise DataFormatError(
                f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataFormatError(
                f"labels span [{self.labels.min()}, {self.labels.max()}] but "
                f"num_classes = {self.num_classes}")

    def __len__(self):
        return len(self.images)

    @property
    def sample_shape(self):
        return self.images.shape[1:]

    def normalized(self, mean: float, std: float) -> "Dataset":
        if std <= 0:
            raise ConfigurationError(f"normalization std must be > 0, got {std}")
        return replace(self, images=(self.images - mean) / std,
                       norm_mean=mean, norm_std=std)

    def denormalized(self) -> "Dataset":
        if self.norm_mean is None:
            return self
        return replace(self, images=self.images * self.norm_std + self.norm_mean,
                       norm_mean=None, norm_std=None)

    def subset(self, index, split: str = None) -> "Dataset":
        return replace(self, images=self.images[index],
                       labels=self.labels[index],
                       split=split or self.split)


def _read_maybe_gzip(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(fh) as gz:
                return gz.read()
        return fh.read()


def _find_idx_file(directory, stem):
    for name in (stem, stem + ".gz"):
        candidate = os.path.join(directory, name)
        if os.path.exists(candidate):
            return candidate
    raise FileNotFoundError(
        f"no {stem}[.gz] under {directory!r}; expected the standard IDX files")


def _parse_idx(raw: bytes, expect_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated before magic (4 bytes needed)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise DataFormatError(
            f"{path}: bad magic 0x{magic:08x} at offset 0, "
            f"expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DataFormatError(
            f"{path}: truncated header at offset {len(raw)}, "
            f"need {header_len} bytes")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = header_len + int(np.prod(dims))
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: expected {expected} bytes for dims {dims}, "
            f"got {len(raw)} (data starts at offset {header_len})")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims)


def load_mnist_idx(path, split: str = "train") -> Dataset:
    """Load one MNIST split from the standard IDX files under `path`."""
    if split not in MNIST_FILES:
        raise ConfigurationError(f"split must be train or test, got {split!r}")
    img_stem, lab_stem = MNIST_FILES[split]
    img_path = _find_idx_file(path, img_stem)
    lab_path = _find_idx_file(path, lab_stem)
    images = _parse_idx(_read_maybe_gzip(img_path), _IDX_IMAGES_MAGIC, img_path)
    labels = _parse_idx(_read_maybe_gzip(lab_path), _IDX_LABELS_MAGIC, lab_path)
    if len(images) != len(labels):
        raise DataFormatError(
            f"{img_path}: {len(images)} images but {len(labels)} labels")
    n, h, w = images.shape
    return Dataset(images.astype(np.float64).reshape(n, 1, h, w) / 255.0,
                   labels.astype(np.int64), split, num_classes=10)


def load_cifar10_binary(path, split: str = "train") -> Dataset:
    """Load CIFAR-10 from 3073-byte-record binary batch files.

    `path` may be a single .bin file or a directory holding the standard
    data_batch_1..5.bin (train) / test_batch.bin (test) names.
    """
    if os.path.isdir(path):
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] \
            if split == "train" else ["test_batch.bin"]
        files = [_find_idx_file(path, n) for n in names]
    else:
        files = [path]
    record = 3073
    images, labels = [], []
    for f in files:
        raw = _read_maybe_gzip(f)
        if len(raw) == 0 or len(raw) % record:
            raise DataFormatError(
                f"{f}: {len(raw)} bytes is not a multiple of the {record}-byte "
                f"record (misalignment at offset {len(raw) - len(raw) % record})")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        labs = arr[:, 0]
        if labs.max() > 9:
            bad = int(np.argmax(labs > 9))
            raise DataFormatError(
                f"{f}: label byte {labs[bad]} > 9 in record {bad} "
                f"(offset {bad * record})")
        labels.append(labs.astype(np.int64))
        images.append(arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    return Dataset(np.concatenate(images), np.concatenate(labels), split,
                   num_classes=10)


def synth_blobs(num_classes: int, n_per_class: int, dim: int, seed: int,
                margin: float = 4.0, split: str = "train") -> Dataset:
    """Gaussian class clusters with means `margin` apart along random axes."""
    if min(num_classes, n_per_class, dim) < 1:
        raise ConfigurationError("num_classes, n_per_class, dim must be >= 1")
    rng = np.random.default_rng(
        np.random.SeedSequence([_BLOBS_STREAM, int(seed)]))
    # axis-aligned means while they fit keeps the advertised separation exact
    means = np.zeros((num_classes, dim))
    for c in range(num_classes):
        if c < dim:
            means[c, c] = margin
        else:
            v = rng.normal(size=dim)
            means[c] = margin * v / np.linalg.norm(v)
    xs, ys = [], []
    for c in range(num_classes):
        xs.append(means[c] + rng.normal(size=(n_per_class, dim)))
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    return Dataset(np.concatenate(xs), np.concatenate(ys), split, num_classes)


def batch_rng(seed: int) -> np.random.Generator:
    """The sampling stream used by the training loop, one per run seed."""
    return np.random.default_rng(
        np.random.SeedSequence([_BATCH_STREAM, int(seed)]))


def poisson_batches(dataset: Dataset, q: float, rng: np.random.Generator):
    """Endless stream of index arrays; each example joins a batch with prob q."""
    if not (0.0 < q <= 1.0):
        raise ConfigurationError(f"sampling rate must be in (0,1], got {q}")
    n = len(dataset)
    while True:
        yield np.flatnonzero(rng.random(n) < q)
