"""Dataset ingestion: IDX (MNIST layout), CIFAR-10 binary batches, and a
seeded synthetic generator so every benchmark can run without downloads.

Also home of the shared nearest-neighbor kernel. The kernel scores one test
image at a time in float64, so a prediction depends only on that image and
the training set; any partition of the test images over workers yields
bitwise-identical labels to a sequential pass.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", 60_000),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 10_000),
}
CIFAR_FILES = {
    "train": ([f"data_batch_{i}.bin" for i in range(1, 6)], 50_000),
    "test": (["test_batch.bin"], 10_000),
}


class DatasetError(ValueError):
    pass


@dataclass
class DatasetHandle:
    name: str  # mnist | cifar10 | synthetic
    split: str
    count: int
    sample_shape: tuple
    images: np.ndarray  # float32 in [0, 1], shape (count, *sample_shape)
    labels: np.ndarray  # int64, shape (count,)
    source: str = ""

    def __post_init__(self) -> None:
        if self.images.shape != (self.count, *self.sample_shape):
            raise DatasetError(
                f"images shape {self.images.shape} != ({self.count}, *{self.sample_shape})"
            )
        if self.labels.shape != (self.count,):
            raise DatasetError(f"labels shape {self.labels.shape} != ({self.count},)")

    def flat(self) -> np.ndarray:
        return self.images.reshape(self.count, -1)

    def subset(self, count: int, offset: int = 0) -> "DatasetHandle":
        if offset + count > self.count:
            raise DatasetError(f"subset [{offset}:{offset + count}] exceeds {self.count} samples")
        return DatasetHandle(
            self.name,
            self.split,
            count,
            self.sample_shape,
            self.images[offset : offset + count],
            self.labels[offset : offset + count],
            self.source,
        )


# -- IDX (MNIST) ---------------------------------------------------------------


def read_idx_images(data: bytes) -> np.ndarray:
    if len(data) < 16:
        raise DatasetError("truncated IDX image file: missing header")
    magic, count, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DatasetError(f"bad IDX image magic {magic}, expected {IDX_IMAGES_MAGIC}")
    expected = 16 + count * rows * cols
    if len(data) != expected:
        raise DatasetError(f"IDX image file is {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def read_idx_labels(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise DatasetError("truncated IDX label file: missing header")
    magic, count = struct.unpack(">II", data[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DatasetError(f"bad IDX label magic {magic}, expected {IDX_LABELS_MAGIC}")
    if len(data) != 8 + count:
        raise DatasetError(f"IDX label file is {len(data)} bytes, expected {8 + count}")
    return np.frombuffer(data, dtype=np.uint8, offset=8).astype(np.int64)


def load_mnist(root, split: str = "train") -> DatasetHandle:
    if split not in MNIST_FILES:
        raise DatasetError(f"unknown MNIST split {split!r}")
    img_name, lbl_name, expected = MNIST_FILES[split]
    root = Path(root)
    images = read_idx_images((root / img_name).read_bytes())
    labels = read_idx_labels((root / lbl_name).read_bytes())
    if len(images) != expected or len(labels) != expected:
        raise DatasetError(f"MNIST {split}: {len(images)} samples, expected {expected}")
    return DatasetHandle(
        "mnist",
        split,
        expected,
        (28, 28),
        images.astype(np.float32) / 255.0,
        labels,
        source=str(root),
    )


# -- CIFAR-10 binary -------------------------------------------------------------


def read_cifar_batch(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """One binary batch: records of 1 label byte + 3072 pixel bytes."""
    record = 1 + 3 * 32 * 32
    if not data or len(data) % record:
        raise DatasetError(f"CIFAR batch is {len(data)} bytes, not a multiple of {record}")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, record)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(root, split: str = "train") -> DatasetHandle:
    if split not in CIFAR_FILES:
        raise DatasetError(f"unknown CIFAR-10 split {split!r}")
    names, expected = CIFAR_FILES[split]
    root = Path(root)
    images, labels = [], []
    for name in names:
        imgs, lbls = read_cifar_batch((root / name).read_bytes())
        images.append(imgs)
        labels.append(lbls)
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    if len(images) != expected:
        raise DatasetError(f"CIFAR-10 {split}: {len(images)} samples, expected {expected}")
    return DatasetHandle(
        "cifar10",
        split,
        expected,
        (3, 32, 32),
        images.astype(np.float32) / 255.0,
        labels,
        source=str(root),
    )


# -- synthetic --------------------------------------------------------------------


def synthetic_dataset(
    count: int,
    sample_shape: tuple = (1, 28, 28),
    classes: int = 10,
    seed: int = 0,
    noise: float = 0.25,
    split: str = "train",
) -> DatasetHandle:
    """Seeded Gaussian blobs around per-class prototype images. Prototypes
    depend only on (sample_shape, classes, seed ^ split), so train and test
    splits of the same seed share classes but not samples."""
    proto_rng = np.random.default_rng(seed)
    protos = proto_rng.random((classes, *sample_shape), dtype=np.float32)
    sample_rng = np.random.default_rng((seed << 1) + (1 if split == "test" else 0) + 12345)
    labels = sample_rng.integers(0, classes, size=count)
    images = protos[labels] + noise * sample_rng.standard_normal(
        (count, *sample_shape), dtype=np.float32
    )
    np.clip(images, 0.0, 1.0, out=images)
    return DatasetHandle(
        "synthetic", split, count, tuple(sample_shape), images, labels, source=f"seed={seed}"
    )


def load_dataset(name: str, root=None, split: str = "train", **synth_kwargs) -> DatasetHandle:
    if name == "mnist":
        return load_mnist(root, split)
    if name == "cifar10":
        return load_cifar10(root, split)
    if name == "synthetic":
        return synthetic_dataset(split=split, **synth_kwargs)
    raise DatasetError(f"unknown dataset {name!r}")


# -- nearest neighbor ---------------------------------------------------------------


def nearest_neighbor_labels(
    test: np.ndarray, train: np.ndarray, train_labels: np.ndarray
) -> np.ndarray:
    """1-NN by L2 distance; one float64 matvec per test image so results are
    independent of how the test set is partitioned. Ties go to the lowest
    training index."""
    test2 = test.reshape(len(test), -1).astype(np.float64)
    train2 = train.reshape(len(train), -1).astype(np.float64)
    if test2.shape[1] != train2.shape[1]:
        raise DatasetError(f"test dim {test2.shape[1]} != train dim {train2.shape[1]}")
    # ||t - x||^2 = ||x||^2 - 2 t.x + ||t||^2; the ||t||^2 term is constant
    # per test image and cannot change the argmin, so it is dropped.
    train_sq = np.einsum("ij,ij->i", train2, train2)
    out = np.empty(len(test2), dtype=np.int64)
    for i, t in enumerate(test2):
        scores = train_sq - 2.0 * (train2 @ t)
        out[i] = train_labels[int(np.argmin(scores))]
    return out


# -- raw blob codecs (resource payloads) ---------------------------------------------


def to_f32le(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def from_f32le(data: bytes, shape: tuple) -> np.ndarray:
    expected = int(np.prod(shape)) * 4
    if len(data) != expected:
        raise DatasetError(f"blob is {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)


def labels_to_bytes(labels: np.ndarray) -> bytes:
    if labels.min() < 0 or labels.max() > 255:
        raise DatasetError("labels must fit in uint8")
    return labels.astype(np.uint8).tobytes()


def labels_from_bytes(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)
