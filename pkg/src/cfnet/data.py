"""Dataset ingestion, normalization, augmentation, and synthetic data.

Images are [N,3,H,W] float32 arrays; labels are int64 class indices.  Batch
order is a pure function of (seed, epoch), and every generator is PCG64
seeded, so data pipelines are bit-reproducible.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint

CIFAR10_RECORD = 3073   # 1 label byte + 3*1024 channel-plane bytes
CIFAR100_RECORD = 3074  # coarse + fine label bytes + pixels

_CIFAR10_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
_CIFAR10_TEST = ("test_batch.bin",)
_CIFAR100_FILES = {"train": ("train.bin",), "test": ("test.bin",)}


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise ValueError(f"images must be [N,C,H,W] with N >= 1, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must be one index per image")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels out of range [0,{self.num_classes})")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("images contain non-finite values")

    def __len__(self):
        return self.images.shape[0]


def _read_records(path, record_size):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % record_size != 0:
        offset = len(raw) - len(raw) % record_size
        raise ValueError(
            f"truncated file {path}: size {len(raw)} is not a multiple of the "
            f"{record_size}-byte record; partial record starts at byte offset {offset}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(-1, record_size)


def _decode_cifar(paths, record_size, label_column, num_classes, split):
    images = []
    labels = []
    for path in paths:
        records = _read_records(path, record_size)
        lab = records[:, label_column].astype(np.int64)
        if lab.size and lab.max() >= num_classes:
            raise ValueError(
                f"label byte {int(lab.max())} >= {num_classes} in {path}")
        pixel_bytes = records[:, record_size - 3072:]
        images.append(pixel_bytes.reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
        labels.append(lab)
    return Dataset(np.concatenate(images), np.concatenate(labels), num_classes, split)


def _resolve_files(path, split, train_names, test_names):
    if os.path.isfile(path):
        return (path,)
    names = train_names if split == "train" else test_names
    files = tuple(os.path.join(path, n) for n in names)
    for f in files:
        if not os.path.isfile(f):
            raise FileNotFoundError(f"missing CIFAR batch file {f}")
    return files


def load_cifar10(path, split="train"):
    """Load CIFAR-10 binary batches from a file or the canonical directory."""
    files = _resolve_files(path, split, _CIFAR10_TRAIN, _CIFAR10_TEST)
    return _decode_cifar(files, CIFAR10_RECORD, 0, 10, split)


def load_cifar100(path, split="train"):
    """Load CIFAR-100 (fine labels, 100-way) from a file or directory."""
    if os.path.isfile(path):
        files = (path,)
    else:
        files = tuple(os.path.join(path, n) for n in _CIFAR100_FILES[split])
        for f in files:
            if not os.path.isfile(f):
                raise FileNotFoundError(f"missing CIFAR batch file {f}")
    # byte 0 is the coarse label, byte 1 the fine label
    return _decode_cifar(files, CIFAR100_RECORD, 1, 100, split)


def gcn_normalize(images):
    """Per-image global contrast normalization: zero mean, unit std.

    Statistics are taken over all channels and pixels of each image in
    float64; the std is guarded as max(std, 1e-8) so constant images map to
    zeros.  Applying it twice changes values by less than 1e-6.
    """
    out = np.empty_like(images)
    chunk = 2048
    for start in range(0, images.shape[0], chunk):
        x = images[start:start + chunk].astype(np.float64)
        m = x.mean(axis=(1, 2, 3), keepdims=True)
        s = x.std(axis=(1, 2, 3), keepdims=True)
        out[start:start + chunk] = ((x - m) / np.maximum(s, 1e-8)).astype(images.dtype)
    return out


def augment(image, seed, pad=4, crop=None, flip=None):
    """Pad-crop-flip augmentation of one [C,H,W] image, reproducible from seed.

    Zero-pads ``pad`` pixels on each side, crops back to the original extent
    at a random offset, then flips horizontally with probability 1/2.  The
    offset and flip draws come from one PCG64 generator, in that order;
    ``crop`` (y, x offsets into the padded image) and ``flip`` override the
    draws when given.
    """
    c, h, w = image.shape
    rng = np.random.Generator(np.random.PCG64(seed))
    oy, ox = rng.integers(0, 2 * pad + 1, size=2)
    do_flip = bool(rng.integers(0, 2))
    if crop is not None:
        oy, ox = crop
    if flip is not None:
        do_flip = flip
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    window = padded[:, oy:oy + h, ox:ox + w]
    if do_flip:
        window = window[:, :, ::-1]
    return np.ascontiguousarray(window)


def sample_seed(seed, epoch, index):
    """Stable per-sample augmentation seed from (run seed, epoch, index)."""
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def augment_batch(images, seeds, pad=4):
    out = np.empty_like(images)
    for i, s in enumerate(seeds):
        out[i] = augment(images[i], s, pad=pad)
    return out


def make_synthetic(num_classes, n, size, seed):
    """Class-conditional oriented gratings plus noise, deterministic from seed.

    Class c gets orientation pi*c/C and spatial frequency 2+c with a fixed
    base phase; each sample draws a small phase jitter, an amplitude factor,
    and Gaussian noise.  Labels cycle 0..C-1 so classes stay balanced.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if n < 1 or size < 2:
        raise ValueError("need n >= 1 samples of size >= 2")
    rng = np.random.Generator(np.random.PCG64(seed))
    grid = np.arange(size, dtype=np.float64) / size
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    labels = np.arange(n, dtype=np.int64) % num_classes
    images = np.empty((n, 3, size, size), dtype=np.float32)
    channel_shift = 0.7 * np.arange(3)[:, None, None]
    for i in range(n):
        c = int(labels[i])
        theta = np.pi * c / num_classes
        u = np.cos(theta) * xx + np.sin(theta) * yy
        jitter = rng.uniform(-0.4, 0.4)
        amp = rng.uniform(0.8, 1.2)
        noise = rng.normal(0.0, 0.25, size=(3, size, size))
        phase = 2.0 * np.pi * c / num_classes + jitter
        img = amp * np.sin(2.0 * np.pi * (2.0 + c) * u[None] + phase + channel_shift)
        images[i] = (img + noise).astype(np.float32)
    return Dataset(images, labels, num_classes, split="train")


class Batch(NamedTuple):
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


@dataclass
class BatchStream:
    """Deterministic shuffled mini-batches; order is a function of (seed, epoch)."""

    dataset: Dataset
    batch_size: int
    seed: int = 0
    epoch: int = field(default=0)


def epoch_order(stream):
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([stream.seed, stream.epoch])))
    return rng.permutation(len(stream.dataset))


def batches(stream):
    """Yield batches covering the dataset exactly once, then advance the epoch.

    The final short batch is kept.
    """
    n = len(stream.dataset)
    if stream.batch_size < 1 or stream.batch_size > n:
        raise ValueError(f"batch size {stream.batch_size} out of range 1..{n}")
    order = epoch_order(stream)
    stream.epoch += 1
    images, labels = stream.dataset.images, stream.dataset.labels

    def generate():
        for start in range(0, n, stream.batch_size):
            idx = order[start:start + stream.batch_size]
            yield Batch(images[idx], labels[idx], idx)

    return generate()


_SPLIT_CODES = {"train": 0, "test": 1}
_SPLIT_NAMES = {v: k for k, v in _SPLIT_CODES.items()}


def save_dataset(path, dataset):
    """Persist a dataset in the checkpoint container for cross-run reuse."""
    meta = np.array([dataset.num_classes, _SPLIT_CODES[dataset.split]],
                    dtype=np.float64)
    save_checkpoint(path, [
        ("images", dataset.images),
        ("labels", dataset.labels.astype(np.float64)),
        ("meta", meta),
    ])


def load_dataset(path):
    entries = dict(load_checkpoint(path))
    meta = entries["meta"]
    return Dataset(entries["images"], entries["labels"].astype(np.int64),
                   int(meta[0]), _SPLIT_NAMES[int(meta[1])])
