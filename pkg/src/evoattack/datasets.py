"""Dataset ingestion: MNIST IDX, CIFAR-10 binary batches and a synthetic 8x8 set.

Pixels are stored as float64 in [0, 1] everywhere past this module. Images
are flattened row-major in (height, width, channels) order, so a colour pixel
at (i, j) occupies positions ``3 * (i * width + j) + (0, 1, 2)`` for R, G, B.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_IMAGE4_MAGIC = 0x00000804  # (count, h, w, c), written for colour images
IDX_LABEL_MAGIC = 0x00000801

CIFAR_RECORD = 3073
CIFAR_SHAPE = (32, 32, 3)


class DatasetFormatError(ValueError):
    """Malformed dataset file. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, path, offset: int):
        super().__init__(f"{path}: {message} (byte offset {offset})")
        self.path = str(path)
        self.offset = offset


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, h*w*c) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int
    shape: tuple[int, int, int]

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.shape = tuple(int(s) for s in self.shape)
        n = int(np.prod(self.shape))
        if self.images.ndim != 2 or self.images.shape[1] != n:
            if self.images.size == 0:
                self.images = self.images.reshape(0, n)
            else:
                raise ValueError(f"images must be (N, {n}), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def num_features(self) -> int:
        return int(np.prod(self.shape))

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(self.images[index], self.labels[index], self.num_classes, self.shape)


def normalize(raw) -> np.ndarray:
    """Map 8-bit pixel values to [0, 1]."""
    return np.asarray(raw, dtype=np.float64) / 255.0


def denormalize(pixels) -> np.ndarray:
    """Map [0, 1] pixels back to 8-bit values, rounding to nearest."""
    return np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _read_header(buf: bytes, path, ndim: int, offset: int = 4):
    end = offset + 4 * ndim
    if len(buf) < end:
        raise DatasetFormatError("truncated header", path, len(buf))
    return struct.unpack(f">{ndim}I", buf[offset:end]), end


def load_idx(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    """Read an IDX image/label file pair.

    ``num_classes`` defaults to ``max(label) + 1`` (at least 2).
    """
    ibuf = Path(images_path).read_bytes()
    lbuf = Path(labels_path).read_bytes()
    if len(ibuf) < 4:
        raise DatasetFormatError("truncated magic", images_path, len(ibuf))
    if len(lbuf) < 4:
        raise DatasetFormatError("truncated magic", labels_path, len(lbuf))

    (magic,) = struct.unpack(">I", ibuf[:4])
    if magic == IDX_IMAGE_MAGIC:
        (count, rows, cols), start = _read_header(ibuf, images_path, 3)
        shape = (rows, cols, 1)
    elif magic == IDX_IMAGE4_MAGIC:
        (count, rows, cols, chans), start = _read_header(ibuf, images_path, 4)
        shape = (rows, cols, chans)
    else:
        raise DatasetFormatError(f"bad image magic 0x{magic:08x}", images_path, 0)

    (lmagic,) = struct.unpack(">I", lbuf[:4])
    if lmagic != IDX_LABEL_MAGIC:
        raise DatasetFormatError(f"bad label magic 0x{lmagic:08x}", labels_path, 0)
    (lcount,), lstart = _read_header(lbuf, labels_path, 1)
    if lcount != count:
        raise DatasetFormatError(f"label count {lcount} != image count {count}", labels_path, 4)

    n = rows * cols * shape[2]
    need = start + count * n
    if len(ibuf) < need:
        raise DatasetFormatError(f"truncated payload, expected {need} bytes", images_path, len(ibuf))
    if len(lbuf) < lstart + count:
        raise DatasetFormatError(
            f"truncated payload, expected {lstart + count} bytes", labels_path, len(lbuf))

    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=count * n, offset=start)
    labels = np.frombuffer(lbuf, dtype=np.uint8, count=count, offset=lstart).astype(np.int64)
    if num_classes is None:
        num_classes = max(2, int(labels.max()) + 1 if count else 2)
    return LabeledDataset(normalize(pixels).reshape(count, n), labels, num_classes, shape)


def write_idx(dataset: LabeledDataset, images_path, labels_path) -> None:
    """Write a dataset as an IDX pair (pixels rounded to 8 bits).

    Single-channel images use magic 0x803 with dims (count, h, w); colour
    images use 0x804 with dims (count, h, w, c).
    """
    h, w, c = dataset.shape
    count = len(dataset)
    if c == 1:
        header = struct.pack(">4I", IDX_IMAGE_MAGIC, count, h, w)
    else:
        header = struct.pack(">5I", IDX_IMAGE4_MAGIC, count, h, w, c)
    Path(images_path).write_bytes(header + denormalize(dataset.images).tobytes())
    labels = dataset.labels.astype(np.uint8).tobytes()
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABEL_MAGIC, count) + labels)


def load_cifar10(batch_paths) -> LabeledDataset:
    """Read CIFAR-10 binary batches (1 label byte + 3072 channel-planar pixels).

    Pixels are reordered from planar (R-plane, G-plane, B-plane) to
    interleaved (h, w, c).
    """
    if isinstance(batch_paths, (str, Path)):
        batch_paths = [batch_paths]
    images, labels = [], []
    for path in batch_paths:
        buf = Path(path).read_bytes()
        whole = len(buf) - len(buf) % CIFAR_RECORD
        if whole != len(buf):
            raise DatasetFormatError(
                f"file length {len(buf)} is not a multiple of {CIFAR_RECORD}", path, whole)
        records = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.flatnonzero(records[:, 0] >= 10)
        if bad.size:
            raise DatasetFormatError(
                f"label byte {records[bad[0], 0]} >= 10", path, int(bad[0]) * CIFAR_RECORD)
        planar = records[:, 1:].reshape(-1, 3, 32, 32)
        images.append(planar.transpose(0, 2, 3, 1).reshape(-1, 3072))
        labels.append(records[:, 0].astype(np.int64))
    if not images:
        return LabeledDataset(np.zeros((0, 3072)), np.zeros(0, dtype=np.int64), 10, CIFAR_SHAPE)
    return LabeledDataset(normalize(np.concatenate(images)), np.concatenate(labels), 10, CIFAR_SHAPE)


def bar_template(label: int, num_classes: int, size: int = 8) -> np.ndarray:
    """Anti-aliased bar through the image centre at angle ``pi * label / num_classes``."""
    theta = np.pi * label / num_classes
    centre = (size - 1) / 2.0
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    y, x = centre - rows, cols - centre
    # perpendicular distance to the line through the centre
    dist = np.abs(x * np.sin(theta) - y * np.cos(theta))
    return np.clip(1.0 - dist, 0.0, 1.0)


def gen_synthetic(num_classes: int = 10, per_class: int = 100, seed: int = 0,
                  noise: float = 0.1) -> LabeledDataset:
    """Deterministic 8x8x1 dataset: one oriented-bar template per class plus uniform noise.

    Samples are grouped by class (all of class 0 first).
    """
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    if not 0.0 <= noise <= 0.1:
        raise ValueError("noise amplitude must lie in [0, 0.1]")
    rng = np.random.default_rng(seed)
    templates = np.stack([bar_template(c, num_classes).ravel() for c in range(num_classes)])
    labels = np.repeat(np.arange(num_classes), per_class)
    jitter = rng.uniform(-noise, noise, size=(len(labels), 64))
    images = np.clip(templates[labels] + jitter, 0.0, 1.0)
    return LabeledDataset(images, labels, num_classes, (8, 8, 1))


def split(dataset: LabeledDataset, train_fraction: float = 0.8, seed: int = 0):
    """Seeded shuffle, then the first ``floor(N * f)`` samples form the training part."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    order = np.random.default_rng(seed).permutation(len(dataset))
    cut = int(np.floor(len(dataset) * train_fraction))
    return dataset.subset(order[:cut]), dataset.subset(order[cut:])
