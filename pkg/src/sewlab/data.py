"""Datasets: a seeded synthetic image task, CIFAR-10 binary batches, splits."""

import struct
from dataclasses import dataclass, field

import numpy as np

from sewlab.errors import FormatError, NotACheckpointError, TruncatedFileError

CIFAR_RECORD = 1 + 3 * 32 * 32
DATA_MAGIC = b"SEWDATA1"


@dataclass
class LabeledDataset:
    images: np.ndarray  # [n, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [n] int64 in [0, k)
    num_classes: int
    index: np.ndarray = field(default=None, repr=False)  # source row of each sample

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.index is None:
            self.index = np.arange(len(self.labels))
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, k)")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes,
                              self.index[idx])

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


def _class_pattern(c, k, channels, size, amplitude):
    # one grating per class; orientation and frequency both vary with c
    theta = np.pi * c / k
    freq = 1.5 + (c % 3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    phase = 2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta))
    wave = np.sin(phase + 0.7 * c)
    tint = 0.6 + 0.4 * np.cos(2 * np.pi * (np.arange(channels) / channels + c / k))
    return 0.5 + amplitude * tint[:, None, None] * wave[None]


def gen_synthetic(k=4, n_per_class=200, size=16, seed=0, channels=3,
                  amplitude=0.12, jitter=0.05, texture_jitter=0.3):
    """Class-specific gratings plus per-pixel Gaussian jitter, clamped to [0, 1].

    ``texture_jitter``, when set, replaces the jitter level of the last class,
    giving the task one strongly textured class. Classifiers then tend to
    send heavy input noise to that class rather than to an arbitrary one.
    """
    if k < 2:
        raise ValueError("need at least two classes")
    if size < 8:
        raise ValueError("size must be >= 8 so a 6x6 patch stays a local feature")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    images = np.empty((k * n_per_class, channels, size, size), dtype=np.float32)
    for c in range(k):
        base = _class_pattern(c, k, channels, size, amplitude)
        sd = texture_jitter if (texture_jitter is not None and c == k - 1) else jitter
        noise = rng.normal(0.0, sd, size=(n_per_class, channels, size, size))
        images[c * n_per_class:(c + 1) * n_per_class] = np.clip(base + noise, 0.0, 1.0)
    labels = np.repeat(np.arange(k), n_per_class)
    return LabeledDataset(images, labels, k)


def split(ds, fraction, seed):
    """Stratified shuffle-then-cut; returns (train, test)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        members = members[rng.permutation(len(members))]
        cut = int(round(fraction * len(members)))
        train_idx.append(members[:cut])
        test_idx.append(members[cut:])
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise ValueError(f"fraction {fraction} leaves an empty split")
    train_idx = train_idx[rng.permutation(len(train_idx))]
    test_idx = test_idx[rng.permutation(len(test_idx))]
    return ds.subset(train_idx), ds.subset(test_idx)


def parse_cifar10(buf):
    if len(buf) % CIFAR_RECORD != 0:
        raise TruncatedFileError(
            f"CIFAR-10 batch length {len(buf)} is not a multiple of {CIFAR_RECORD}"
        )
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        bad = int(np.flatnonzero(labels >= 10)[0])
        raise FormatError(f"record {bad}: label byte {labels[bad]} >= 10")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return images, labels


def load_cifar10(paths):
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    images, labels = [], []
    for p in paths:
        with open(p, "rb") as fh:
            x, y = parse_cifar10(fh.read())
        images.append(x)
        labels.append(y)
    return LabeledDataset(np.concatenate(images), np.concatenate(labels), 10)


def save_dataset(ds, path):
    n = len(ds)
    c, h, w = ds.image_shape
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<IIIII", ds.num_classes, n, c, h, w))
        fh.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
        fh.write(ds.labels.astype(np.uint8).tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != DATA_MAGIC:
        raise NotACheckpointError(f"{path}: not a SEWDATA1 container")
    if len(buf) < 28:
        raise TruncatedFileError(f"{path}: truncated header")
    k, n, c, h, w = struct.unpack("<IIIII", buf[8:28])
    npix = n * c * h * w
    if len(buf) != 28 + 4 * npix + n:
        raise TruncatedFileError(f"{path}: payload length does not match header")
    images = np.frombuffer(buf[28:28 + 4 * npix], dtype="<f4").reshape(n, c, h, w)
    labels = np.frombuffer(buf[28 + 4 * npix:], dtype=np.uint8)
    return LabeledDataset(images.astype(np.float32), labels.astype(np.int64), k)
