"""Datasets: a synthetic template task and an IDX (MNIST-format) loader."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .rng import substream
from .supernet import Minibatch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Split:
    inputs: np.ndarray  # float32 [N, C, H, W]
    labels: np.ndarray  # int64 [N]

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        for i in range(len(self)):
            yield self.inputs[i], int(self.labels[i])

    def batches(self, batch_size, order=None, drop_last=False):
        n = len(self)
        idx = np.arange(n) if order is None else order
        stop = n - n % batch_size if drop_last else n
        for lo in range(0, stop, batch_size):
            sel = idx[lo:lo + batch_size]
            yield Minibatch(self.inputs[sel], self.labels[sel])

    def subset(self, count):
        return Split(self.inputs[:count], self.labels[:count])


@dataclass
class Dataset:
    train: Split
    test: Split
    num_classes: int

    @property
    def resolution(self):
        return self.train.inputs.shape[2]

    @property
    def channels(self):
        return self.train.inputs.shape[1]

    def steps_per_epoch(self, batch_size):
        return len(self.train) // batch_size

    def train_batches(self, epoch, seed, batch_size):
        """Shuffled full batches for one epoch; the order depends only on (seed, epoch)."""
        order = substream(seed, f"shuffle/{epoch}").permutation(len(self.train))
        return self.train.batches(batch_size, order=order, drop_last=True)


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_classes: int = 10
    resolution: int = 16
    channels: int = 1
    train_size: int = 640
    test_size: int = 1000
    noise: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class IdxDatasetSpec:
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    num_classes: int = 10


def class_templates(spec: SyntheticDatasetSpec):
    rng = substream(spec.seed, "templates")
    return rng.normal(size=(spec.num_classes, spec.channels, spec.resolution, spec.resolution))


def _synthetic_split(spec, templates, size, label):
    rng = substream(spec.seed, f"labels/{label}")
    labels = rng.permutation(np.arange(size) % spec.num_classes)
    noise = substream(spec.seed, f"noise/{label}").normal(size=(size,) + templates.shape[1:])
    return Split((templates[labels] + spec.noise * noise).astype(np.float32), labels.astype(np.int64))


def generate_synthetic(spec: SyntheticDatasetSpec) -> Dataset:
    """Raw (unnormalized) template-plus-noise splits."""
    if spec.num_classes < 2 or spec.train_size < 1 or spec.test_size < 1 or spec.noise < 0:
        raise ValidationError("dataset", f"invalid synthetic spec {spec}")
    templates = class_templates(spec)
    return Dataset(_synthetic_split(spec, templates, spec.train_size, "train"),
                   _synthetic_split(spec, templates, spec.test_size, "test"),
                   spec.num_classes)


def normalize(ds: Dataset) -> Dataset:
    """Per-channel standardization with statistics of the train split."""
    x = ds.train.inputs.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    std = x.std(axis=(0, 2, 3), keepdims=True)
    std[std == 0] = 1.0

    def apply(split):
        return Split(((split.inputs - mean) / std).astype(np.float32), split.labels)

    return Dataset(apply(ds.train), apply(ds.test), ds.num_classes)


# -- IDX -------------------------------------------------------------------------


def read_idx(path, expect_magic=None) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated IDX header", offset=len(blob))
    (magic,) = struct.unpack(">I", blob[:4])
    if expect_magic is not None and magic != expect_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expect_magic:08x}", offset=0)
    if magic >> 8 != 0x08:
        raise FormatError(f"{path}: unsupported IDX element type 0x{(magic >> 8) & 0xff:02x}", offset=2)
    ndim = magic & 0xFF
    if ndim == 0:
        raise FormatError(f"{path}: IDX file declares zero dimensions", offset=3)
    hdr = 4 + 4 * ndim
    if len(blob) < hdr:
        raise FormatError(f"{path}: truncated dimension list", offset=len(blob))
    dims = struct.unpack(">" + "I" * ndim, blob[4:hdr])
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) - hdr != count:
        raise FormatError(f"{path}: payload has {len(blob) - hdr} bytes, header declares {count}",
                          offset=hdr)
    return np.frombuffer(blob, dtype=np.uint8, offset=hdr).reshape(dims).copy()


def write_idx(path, array: np.ndarray):
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = (0x08 << 8) | arr.ndim
    header = struct.pack(">I", magic) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_idx_split(images_path, labels_path) -> Split:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected 3 image dimensions, got {images.ndim}", offset=3)
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: expected 1 label dimension, got {labels.ndim}", offset=3)
    if len(images) != len(labels):
        raise FormatError(f"image count {len(images)} != label count {len(labels)}", offset=4)
    return Split((images[:, None, :, :] / 255.0).astype(np.float32), labels.astype(np.int64))


def load_dataset(spec) -> Dataset:
    """Normalized train/test splits for a synthetic or IDX spec."""
    if isinstance(spec, SyntheticDatasetSpec):
        ds = generate_synthetic(spec)
    elif isinstance(spec, IdxDatasetSpec):
        ds = Dataset(load_idx_split(spec.train_images, spec.train_labels),
                     load_idx_split(spec.test_images, spec.test_labels), spec.num_classes)
        for name, split in (("train", ds.train), ("test", ds.test)):
            if len(split) and (split.labels.max() >= spec.num_classes):
                raise ValidationError(f"dataset.{name}", f"label outside [0, {spec.num_classes})")
    else:
        raise ValidationError("dataset", f"unknown dataset spec {type(spec).__name__}")
    return normalize(ds)
