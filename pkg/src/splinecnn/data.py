"""Dataset ingestion: IDX (MNIST) and the CIFAR-10 binary batch format."""

import os
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IngestError(Exception):
    """Malformed dataset file; carries the byte offset of the problem."""

    def __init__(self, message, path=None, offset=None):
        detail = message
        if path is not None:
            detail += f" ({path}"
            if offset is not None:
                detail += f", byte offset {offset}"
            detail += ")"
        super().__init__(detail)
        self.path = path
        self.offset = offset


@dataclass
class Dataset:
    """Images in [0, 1] as [n, h, w, c] float32 plus integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = ""

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise IngestError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self):
        return self.images.shape[0]

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, n):
        return Dataset(self.images[:n], self.labels[:n], split=self.split)


def _read_exact(f, count, path):
    buf = f.read(count)
    if len(buf) != count:
        raise IngestError(f"truncated file: wanted {count} bytes, got {len(buf)}",
                          path=path, offset=f.tell() - len(buf))
    return buf


def load_idx_images(path):
    with open(path, "rb") as f:
        magic, = struct.unpack(">i", _read_exact(f, 4, path))
        if magic != IDX_IMAGES_MAGIC:
            raise IngestError(f"bad image magic 0x{magic:08x}", path=path, offset=0)
        n, h, w = struct.unpack(">3i", _read_exact(f, 12, path))
        raw = _read_exact(f, n * h * w, path)
    return np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w, 1)


def load_idx_labels(path):
    with open(path, "rb") as f:
        magic, = struct.unpack(">i", _read_exact(f, 4, path))
        if magic != IDX_LABELS_MAGIC:
            raise IngestError(f"bad label magic 0x{magic:08x}", path=path, offset=0)
        n, = struct.unpack(">i", _read_exact(f, 4, path))
        raw = _read_exact(f, n, path)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_mnist_idx(images_path, labels_path, split=""):
    """Parse an IDX image/label pair, normalizing pixels to [0, 1]."""
    images = load_idx_images(images_path).astype(np.float32) / 255.0
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IngestError(
            f"{images.shape[0]} images but {labels.shape[0]} labels",
            path=labels_path)
    return Dataset(images=images, labels=labels, split=split)


def load_mnist_dir(data_dir, split="train"):
    images_name, labels_name = MNIST_FILES[split]
    return load_mnist_idx(os.path.join(data_dir, images_name),
                          os.path.join(data_dir, labels_name), split=split)


def load_cifar10_bin(paths, split=""):
    """CIFAR-10 binary batches: records of 1 label byte + 3072 CHW pixel bytes."""
    record = 1 + 3 * 32 * 32
    images, labels = [], []
    for path in paths:
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size % record:
            raise IngestError(f"file size {raw.size} not a multiple of {record}",
                              path=path, offset=raw.size - raw.size % record)
        rows = raw.reshape(-1, record)
        labels.append(rows[:, 0].astype(np.int64))
        images.append(rows[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
    return Dataset(images=np.concatenate(images).astype(np.float32) / 255.0,
                   labels=np.concatenate(labels), split=split)


def write_idx_images(path, images):
    """Write uint8 images [n, h, w] or [n, h, w, 1] in IDX format."""
    arr = np.asarray(images, dtype=np.uint8)
    if arr.ndim == 4:
        arr = arr[..., 0]
    with open(path, "wb") as f:
        f.write(struct.pack(">4i", IDX_IMAGES_MAGIC, *arr.shape))
        f.write(arr.tobytes())


def write_idx_labels(path, labels):
    arr = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">2i", IDX_LABELS_MAGIC, arr.shape[0]))
        f.write(arr.tobytes())
