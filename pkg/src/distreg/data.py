"""Dataset handling: IDX file ingestion, synthetic transfer tasks, batching.

IDX is the big-endian binary format MNIST ships in: a 32-bit magic
(0x00000803 for image files, 0x00000801 for label files), 32-bit extents,
then raw unsigned bytes. Pixels are scaled to [0, 1] on load.
"""

import gzip
import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# Synthetic class blobs are quantized to the same 8-bit grid IDX files
# store, so in-memory generation and a file round trip agree exactly.
BLOB_SIGMA = 0.08


class DataError(Exception):
    """Raised for malformed dataset files; message carries the byte offset."""


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = ""

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.class_count):
            raise DataError(f"labels out of range [0, {self.class_count})")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, count):
        """First ``count`` examples, as a new dataset."""
        count = min(count, len(self))
        return Dataset(self.inputs[:count].copy(), self.labels[:count].copy(),
                       self.class_count, self.name)


def _open_binary(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, count, path, offset):
    data = f.read(count)
    if len(data) != count:
        raise DataError(
            f"{path}: truncated at byte {offset + len(data)}, "
            f"expected {count} more bytes"
        )
    return data


def load_idx(images_path, labels_path, name=None):
    """Load an IDX image/label file pair into a Dataset.

    Image values come back as float64 in [0, 1] with shape
    (n, 1, rows, cols); the class count is inferred from the labels.
    """
    with _open_binary(images_path) as f:
        header = _read_exact(f, 16, images_path, 0)
        magic, n, rows, cols = struct.unpack(">IIII", header)
        if magic != IMAGE_MAGIC:
            raise DataError(
                f"{images_path}: bad image magic 0x{magic:08x} at byte 0 "
                f"(expected 0x{IMAGE_MAGIC:08x})"
            )
        pixels = _read_exact(f, n * rows * cols, images_path, 16)
        if f.read(1):
            raise DataError(f"{images_path}: trailing bytes after byte {16 + n * rows * cols}")
    with _open_binary(labels_path) as f:
        header = _read_exact(f, 8, labels_path, 0)
        magic, n_labels = struct.unpack(">II", header)
        if magic != LABEL_MAGIC:
            raise DataError(
                f"{labels_path}: bad label magic 0x{magic:08x} at byte 0 "
                f"(expected 0x{LABEL_MAGIC:08x})"
            )
        raw_labels = _read_exact(f, n_labels, labels_path, 8)
        if f.read(1):
            raise DataError(f"{labels_path}: trailing bytes after byte {8 + n_labels}")
    if n != n_labels:
        raise DataError(
            f"{images_path} holds {n} images but {labels_path} holds "
            f"{n_labels} labels"
        )
    images = np.frombuffer(pixels, dtype=np.uint8).reshape(n, 1, rows, cols)
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    class_count = int(labels.max()) + 1 if n else 0
    if name is None:
        name = str(images_path)
    return Dataset(images.astype(np.float64) / 255.0, labels, class_count, name)


def write_idx_images(path, images):
    """Write a (n, rows, cols) uint8 array as an IDX image file."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise DataError(f"expected (n, rows, cols) uint8 images, got shape {images.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    """Write a (n,) label vector (values < 256) as an IDX label file."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or (labels.size and (labels.min() < 0 or labels.max() > 255)):
        raise DataError("labels must be a 1D vector of values in [0, 255]")
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def dataset_to_idx_arrays(ds):
    """Quantize a dataset back to the uint8 arrays its IDX files store."""
    n = len(ds)
    images = np.rint(ds.inputs.reshape(n, ds.inputs.shape[-2], ds.inputs.shape[-1])
                     * 255.0).astype(np.uint8)
    return images, ds.labels.astype(np.uint8)


def synthetic_transfer_pair(seed, n_pre, n_fine, d, classes, shift):
    """Generate a pretrain/fine-tune dataset pair of Gaussian class blobs.

    Both tasks share per-class means drawn once from the seed; the
    fine-tune means are translated by ``shift`` along fixed per-class
    directions, and its examples use fresh noise. Values are clipped to
    [0, 1] and quantized to the 8-bit grid, so writing the datasets as
    IDX files and reloading them is lossless. Inputs are shaped as
    square images when ``d`` is a perfect square, else as 1 x d strips.
    """
    if d < 1 or classes < 2:
        raise ValueError(f"need d >= 1 and classes >= 2, got d={d}, classes={classes}")
    if n_fine < classes:
        raise ValueError(f"n_fine={n_fine} must cover all {classes} classes")
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.3, 0.7, size=(classes, d))
    directions = rng.standard_normal((classes, d))
    directions /= np.sqrt((directions ** 2).sum(axis=1, keepdims=True))
    fine_means = np.clip(means + shift * directions, 0.0, 1.0)

    side = int(round(np.sqrt(d)))
    shape = (1, side, side) if side * side == d else (1, 1, d)

    def draw(count, mu, tag):
        labels = np.arange(count) % classes
        noise = rng.standard_normal((count, d)) * BLOB_SIGMA
        x = np.clip(mu[labels] + noise, 0.0, 1.0)
        x = np.rint(x * 255.0) / 255.0
        return Dataset(x.reshape(count, *shape), labels, classes, tag)

    pretrain = draw(n_pre, means, f"synthetic-pretrain-{seed}")
    finetune = draw(n_fine, fine_means, f"synthetic-finetune-{seed}")
    return pretrain, finetune


@dataclass(frozen=True)
class BatchPlan:
    """Deterministic batching: the epoch index keys the permutation."""

    seed: int
    batch_size: int
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def batches(ds, plan, epoch):
    """Index slices covering the dataset exactly once, partial tail kept."""
    n = len(ds)
    if plan.batch_size > n:
        raise ValueError(f"batch_size {plan.batch_size} exceeds dataset size {n}")
    if plan.shuffle:
        order = np.random.default_rng([plan.seed, epoch]).permutation(n)
    else:
        order = np.arange(n)
    return [order[i : i + plan.batch_size] for i in range(0, n, plan.batch_size)]
