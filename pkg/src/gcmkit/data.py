"""Dataset ingestion and the synthetic desk-scale image set.

Two on-disk formats:

* idx: the classic big-endian format. Image files carry magic 0x00000803
  and dimensions (count, rows, cols) as u32; label files carry magic
  0x00000801 and a count. Pixel bytes map to [0,1] by /255. A dataset is a
  {prefix}-images-idx3-ubyte / {prefix}-labels-idx1-ubyte file pair.

* raw-tensor: magic "GCMT", u32 LE rank, u32 LE dims, then little-endian
  float32 payload. A dataset is a {prefix}-images.gcmt / {prefix}-labels.gcmt
  pair; labels are stored as float32 and must hold integral values.

The synthetic generator draws ten low-amplitude smooth class templates on a
mid-gray background, adds Gaussian pixel noise and small circular shifts,
and quantizes to the /255 grid so that writing to idx and reloading is
exact. The low template amplitude keeps trained decision margins small
enough that L-inf 8/255 gradient attacks actually bite, while the noise
level keeps random sign flips at the same budget harmless.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
RAW_MAGIC = b"GCMT"


@dataclass
class Dataset:
    """images: (N,H,W,C) float32 in [0,1]; labels: N integers."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be (N,H,W,C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataFormatError(
                f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels out of range [0, {self.num_classes})")
        if len(self.images) and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataFormatError("image values outside [0, 1]")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes)


# ---------------------------------------------------------------------------
# idx format


def _read_u32be(blob, offset, path):
    if offset + 4 > len(blob):
        raise DataFormatError(f"{path}: truncated header", offset=offset)
    return struct.unpack_from(">I", blob, offset)[0]


def read_idx_images(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    magic = _read_u32be(blob, 0, path)
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(
            f"{path}: magic 0x{magic:08x} is not an idx image file", offset=0)
    n = _read_u32be(blob, 4, path)
    rows = _read_u32be(blob, 8, path)
    cols = _read_u32be(blob, 12, path)
    need = 16 + n * rows * cols
    if len(blob) != need:
        raise DataFormatError(
            f"{path}: expected {need} bytes for {n}x{rows}x{cols}, got {len(blob)}",
            offset=min(len(blob), need))
    pixels = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(n, rows, cols, 1)
    return pixels.astype(np.float32) / 255.0


def read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    magic = _read_u32be(blob, 0, path)
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(
            f"{path}: magic 0x{magic:08x} is not an idx label file", offset=0)
    n = _read_u32be(blob, 4, path)
    need = 8 + n
    if len(blob) != need:
        raise DataFormatError(
            f"{path}: expected {need} bytes for {n} labels, got {len(blob)}",
            offset=min(len(blob), need))
    return np.frombuffer(blob, dtype=np.uint8, offset=8).astype(np.int64)


def write_idx_images(images: np.ndarray, path) -> None:
    """Quantizes float [0,1] images (or passes through uint8) to idx bytes."""
    if images.dtype != np.uint8:
        images = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    if images.ndim == 4:
        if images.shape[3] != 1:
            raise DataFormatError("idx images are single-channel")
        images = images[:, :, :, 0]
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(labels: np.ndarray, path) -> None:
    labels = np.asarray(labels)
    if len(labels) and (labels.min() < 0 or labels.max() > 255):
        raise DataFormatError("idx labels must fit in a byte")
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# raw-tensor format


def write_raw_tensor(array: np.ndarray, path) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<I", array.ndim))
        f.write(struct.pack(f"<{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def read_raw_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8 or blob[:4] != RAW_MAGIC:
        raise DataFormatError(f"{path}: missing raw-tensor magic", offset=0)
    (rank,) = struct.unpack_from("<I", blob, 4)
    head = 8 + 4 * rank
    if len(blob) < head:
        raise DataFormatError(f"{path}: truncated dimension header", offset=len(blob))
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    need = head + 4 * int(np.prod(dims, dtype=np.int64)) if rank else head + 4
    if rank == 0:
        dims = ()
        need = head + 4
    if len(blob) != need:
        raise DataFormatError(
            f"{path}: expected {need} bytes for shape {dims}, got {len(blob)}",
            offset=min(len(blob), need))
    return np.frombuffer(blob, dtype="<f4", offset=head).reshape(dims).copy()


# ---------------------------------------------------------------------------
# dataset-level load/save


def _idx_paths(prefix):
    return f"{prefix}-images-idx3-ubyte", f"{prefix}-labels-idx1-ubyte"


def _raw_paths(prefix):
    return f"{prefix}-images.gcmt", f"{prefix}-labels.gcmt"


def load_dataset(prefix, format: str, num_classes: int = 10) -> Dataset:
    """Load the {prefix} file pair in the given format ('idx' or 'raw-tensor')."""
    if format == "idx":
        img_path, lab_path = _idx_paths(prefix)
        images = read_idx_images(img_path)
        labels = read_idx_labels(lab_path)
    elif format == "raw-tensor":
        img_path, lab_path = _raw_paths(prefix)
        images = read_raw_tensor(img_path)
        raw_labels = read_raw_tensor(lab_path)
        if raw_labels.ndim != 1:
            raise DataFormatError(f"{lab_path}: labels must be rank 1")
        if not np.array_equal(raw_labels, np.round(raw_labels)):
            raise DataFormatError(f"{lab_path}: labels must be integral")
        labels = raw_labels.astype(np.int64)
    else:
        raise DataFormatError(f"unknown dataset format {format!r}; expected idx or raw-tensor")
    if len(images) != len(labels):
        raise DataFormatError(
            f"{img_path} has {len(images)} items but {lab_path} has {len(labels)}", offset=4)
    return Dataset(images, labels, num_classes=num_classes)


def save_dataset(dataset: Dataset, prefix, format: str) -> None:
    if format == "idx":
        img_path, lab_path = _idx_paths(prefix)
        write_idx_images(dataset.images, img_path)
        write_idx_labels(dataset.labels, lab_path)
    elif format == "raw-tensor":
        img_path, lab_path = _raw_paths(prefix)
        write_raw_tensor(dataset.images, img_path)
        write_raw_tensor(dataset.labels.astype(np.float32), lab_path)
    else:
        raise DataFormatError(f"unknown dataset format {format!r}; expected idx or raw-tensor")


# ---------------------------------------------------------------------------
# synthetic desk data


def _class_templates(rng, hw, classes, amplitude):
    h, w = hw
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    templates = np.empty((classes, h, w), dtype=np.float64)
    for c in range(classes):
        t = np.zeros((h, w))
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            t += rng.uniform(0.5, 1.0) * np.cos(2.0 * np.pi * (fy * yy + fx * xx) / h + phase)
        templates[c] = t * (amplitude / np.abs(t).max())
    return templates


def synthesize_dataset(n: int, seed: int, hw=(28, 28), classes: int = 10,
                       amplitude: float = 0.12, noise: float = 0.06,
                       max_shift: int = 2) -> Dataset:
    """Deterministic labeled image set: gray background + per-class smooth
    template + Gaussian noise + circular shift, quantized to the /255 grid."""
    rng = np.random.default_rng(seed)
    # template bank depends only on (seed-derived) class structure, so train
    # and test splits generated with different seeds share it
    templates = _class_templates(np.random.default_rng(20220500 + classes), hw, classes, amplitude)
    labels = rng.integers(0, classes, size=n)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    noise_arr = rng.normal(0.0, noise, size=(n,) + tuple(hw))

    images = np.empty((n,) + tuple(hw), dtype=np.float64)
    for i in range(n):
        t = np.roll(templates[labels[i]], tuple(shifts[i]), axis=(0, 1))
        images[i] = 0.5 + t + noise_arr[i]
    images = np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0
    return Dataset(images.astype(np.float32)[..., None], labels.astype(np.int64),
                   num_classes=classes)


def generate_desk_data(directory, n_train: int, n_test: int, seed: int, **kwargs) -> None:
    """Write train/test idx file pairs under `directory` ({train,test}-...)."""
    import os

    os.makedirs(directory, exist_ok=True)
    train = synthesize_dataset(n_train, seed, **kwargs)
    test = synthesize_dataset(n_test, seed + 1, **kwargs)
    save_dataset(train, os.path.join(directory, "train"), "idx")
    save_dataset(test, os.path.join(directory, "test"), "idx")
