"""Dataset ingestion, synthetic data, batching and augmentation."""

import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ContractError, FormatError

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
IDX_UBYTE = 0x08


@dataclass
class Dataset:
    """Samples ``(n, c, h, w)`` (or flat ``(n, d)``) with labels or reconstruction targets."""

    images: np.ndarray
    labels: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim not in (2, 4):
            raise ContractError(f"images must be (n, c, h, w) or (n, d), got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise ContractError("one label per image required")

    def __len__(self):
        return len(self.images)

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if self.labels is not None else 0

    @property
    def y(self):
        """Labels for classification, targets (or the images) for reconstruction."""
        if self.labels is not None:
            return self.labels
        return self.targets if self.targets is not None else self.images

    def subset(self, idx):
        return Dataset(self.images[idx],
                       None if self.labels is None else self.labels[idx],
                       None if self.targets is None else self.targets[idx],
                       self.split)


def _bcast(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def channel_stats(dataset):
    axes = (0,) + tuple(range(2, dataset.images.ndim))
    mean = dataset.images.mean(axis=axes)
    std = dataset.images.std(axis=axes)
    return mean, np.where(std > 0, std, 1.0)


def standardize(train, *others):
    """Per-channel zero mean / unit variance using statistics of ``train`` only."""
    mean, std = channel_stats(train)
    out = []
    for ds in (train,) + others:
        nd = ds.images.ndim
        images = (ds.images - _bcast(mean, nd)) / _bcast(std, nd)
        targets = ds.targets
        if targets is not None and targets.shape == ds.images.shape:
            targets = (targets - _bcast(mean, nd)) / _bcast(std, nd)
        out.append(Dataset(images, ds.labels, targets, ds.split))
    return tuple(out) if others else out[0]


# --------------------------------------------------------------------------
# CIFAR-10 binary


def _read_cifar_file(path, n_classes=10):
    with open(path, "rb") as fh:
        raw = fh.read()
    n, rem = divmod(len(raw), CIFAR_RECORD)
    if rem:
        raise FormatError(f"truncated record: {rem} of {CIFAR_RECORD} bytes", path, n * CIFAR_RECORD)
    if n == 0:
        raise FormatError("no records", path, 0)
    records = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} out of range [0, {n_classes})", path,
                          int(bad[0]) * CIFAR_RECORD)
    images = records[:, 1:].reshape((n,) + CIFAR_SHAPE).astype(np.float64) / 255.0
    return images, labels


def load_cifar10_binary(path, split="train"):
    """Read CIFAR-10 binary batches (1 label byte + 3072 CHW pixel bytes per record).

    ``path`` may be a single ``.bin`` file or the extracted directory, in
    which case ``data_batch_*.bin`` (train) or ``test_batch.bin`` (test) are
    read. Pixels are scaled to ``[0, 1]``; call :func:`standardize` after.
    """
    if os.path.isdir(path):
        if split == "train":
            files = sorted(f for f in os.listdir(path) if f.startswith("data_batch") and f.endswith(".bin"))
        else:
            files = [f for f in os.listdir(path) if f == "test_batch.bin"]
        if not files:
            raise FormatError(f"no {split} batch files found", path)
        files = [os.path.join(path, f) for f in files]
    else:
        files = [path]
    parts = [_read_cifar_file(f) for f in files]
    return Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), split=split)


def write_cifar10_binary(path, images, labels):
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    if images.shape[1] != CIFAR_RECORD - 1:
        raise ContractError("CIFAR records hold 3x32x32 uint8 images")
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


# --------------------------------------------------------------------------
# IDX


def read_idx(path):
    """Parse an unsigned-byte IDX file into an array of its declared dimensions."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError("file shorter than the magic number", path, 0)
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != IDX_UBYTE or ndim == 0:
        raise FormatError(f"bad IDX magic 0x{raw[:4].hex()}", path, 0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("truncated dimension header", path, len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    payload = len(raw) - header
    if payload != expected:
        raise FormatError(f"payload has {payload} bytes, dimensions need {expected}", path, header)
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ContractError("only unsigned-byte IDX files are written")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, IDX_UBYTE, array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path=None, split="train"):
    """Load an IDX image file (magic 0x00000803) and optional label file (0x00000801)."""
    images = read_idx(images_path)
    if images.ndim != 3:
        raise FormatError(f"expected 3 image dimensions, got {images.ndim}", images_path, 3)
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path)
        if labels.ndim != 1:
            raise FormatError(f"expected 1 label dimension, got {labels.ndim}", labels_path, 3)
        if len(labels) != len(images):
            raise FormatError(f"{len(labels)} labels for {len(images)} images", labels_path, 8)
    return Dataset(images[:, None].astype(np.float64) / 255.0, labels, split=split)


# --------------------------------------------------------------------------
# synthetic data


def _smooth_templates(rng, k, channels, size):
    base = rng.standard_normal((k, channels, size + 2, size + 2))
    # 3x3 box blur gives spatially correlated "texture" templates
    smooth = sum(base[:, :, i:i + size, j:j + size] for i in range(3) for j in range(3)) / 9.0
    rms = np.sqrt((smooth ** 2).mean(axis=(1, 2, 3), keepdims=True))
    return smooth / rms


def synth_blobs(classes, per_class, size=8, seed=0, channels=3, snr=0.5, template_seed=0, split="train"):
    """Class-conditional Gaussian texture patches.

    Each class owns a smooth random template with unit RMS; a sample is
    ``snr * template + N(0, 1)`` noise. Samples whose nearest template (a
    linear decision rule) is not their own class are redrawn, so the data
    are linearly separable by construction. Templates depend only on
    ``template_seed``, so train and test splits drawn with different
    ``seed`` values share class structure.
    """
    if classes < 2:
        raise ContractError("need at least two classes")
    templates = _smooth_templates(np.random.default_rng(template_seed), classes, channels, size) * snr
    flat_t = templates.reshape(classes, -1)
    bias = -0.5 * (flat_t ** 2).sum(axis=1)
    rng = np.random.default_rng(seed)
    images = np.empty((classes * per_class, channels, size, size))
    labels = np.repeat(np.arange(classes), per_class)
    for idx, label in enumerate(labels):
        while True:
            x = templates[label] + rng.standard_normal((channels, size, size))
            if np.argmax(flat_t @ x.ravel() + bias) == label:
                break
        images[idx] = x
    return Dataset(images, labels, split=split)


def synth_split(classes, n_train, n_test, size=8, seed=0, channels=3, snr=0.5):
    """Train/test pair sharing templates; sizes are totals, balanced across classes."""
    train = synth_blobs(classes, n_train // classes, size, seed * 2 + 1, channels, snr, seed, "train")
    test = synth_blobs(classes, n_test // classes, size, seed * 2 + 2, channels, snr, seed, "test")
    return train, test


# --------------------------------------------------------------------------
# batching / augmentation


class BatchIterator:
    """Shuffled minibatches; the order depends only on ``(seed, epoch)``.

    Every epoch visits each index exactly once; the last short batch is kept.
    """

    def __init__(self, n, batch_size, seed=0, shuffle=True):
        if batch_size < 1:
            raise ContractError("batch_size must be positive")
        self.n = n
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle

    def order(self, epoch):
        if not self.shuffle:
            return np.arange(self.n)
        return np.random.default_rng([self.seed, epoch]).permutation(self.n)

    def epoch(self, epoch):
        order = self.order(epoch)
        for start in range(0, self.n, self.batch_size):
            yield order[start:start + self.batch_size]

    def __len__(self):
        return -(-self.n // self.batch_size)


@dataclass
class AugmentConfig:
    """Zero-pad, random crop back to ``crop`` (input size if ``None``), random horizontal flip."""

    pad: int = 4
    flip_prob: float = 0.5
    crop: Optional[int] = None


def hflip(images):
    return images[..., ::-1]


def augment(images, config, rng):
    """Apply the train-time augmentation to a batch ``(n, c, h, w)``."""
    if config.pad < 0:
        raise ContractError("pad must be nonnegative")
    n, c, h, w = images.shape
    crop = config.crop or h
    p = config.pad
    if crop > h + 2 * p or crop > w + 2 * p:
        raise ContractError(f"crop {crop} larger than padded image {h + 2 * p}x{w + 2 * p}")
    out = np.empty((n, c, crop, crop), dtype=images.dtype)
    padded = np.pad(images, ((0, 0), (0, 0), (p, p), (p, p))) if p else images
    ys = rng.integers(0, h + 2 * p - crop + 1, size=n)
    xs = rng.integers(0, w + 2 * p - crop + 1, size=n)
    flips = rng.random(n) < config.flip_prob
    for i in range(n):
        patch = padded[i, :, ys[i]:ys[i] + crop, xs[i]:xs[i] + crop]
        out[i] = patch[..., ::-1] if flips[i] else patch
    return out
