"""Dataset container and loaders for the MNIST IDX and CIFAR binary formats."""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.errors import FormatError

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
CIFAR_IMAGE_BYTES = 3 * 32 * 32
CIFAR10_RECORD = 1 + CIFAR_IMAGE_BYTES
CIFAR100_RECORD = 2 + CIFAR_IMAGE_BYTES

PathLike = Union[str, Path]


@dataclass
class Dataset:
    """Features scaled to [0, 1] with integer class labels, tagged train or test."""

    features: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) == 0:
            raise FormatError(f"{self.split} dataset is empty")
        if len(self.features) != len(self.labels):
            raise FormatError(f"{len(self.features)} samples but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise FormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.features.shape[1:])


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset file not found: {path}")
    return path.read_bytes()


def _parse_idx(raw: bytes, magic: int, ndims: int, path: PathLike) -> np.ndarray:
    header_size = 4 + 4 * ndims
    if len(raw) < header_size:
        raise FormatError(f"{path}: truncated IDX header")
    found, *dims = struct.unpack(f">{1 + ndims}I", raw[:header_size])
    if found != magic:
        raise FormatError(f"{path}: bad IDX magic {found}, expected {magic}")
    expected = header_size + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(f"{path}: IDX payload has {len(raw) - header_size} bytes, expected {expected - header_size}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_size).reshape(dims)


def load_mnist_idx(image_path: PathLike, label_path: PathLike, split: str = "train") -> Dataset:
    """
    Parse a big-endian IDX image/label pair.

    Args:
        image_path: IDX file with magic 2051 and dimensions n x rows x cols
        label_path: IDX file with magic 2049 and dimension n
        split: Split tag stored on the dataset

    Returns:
        Dataset of shape (n, rows, cols) with pixels scaled by 1/255
    """
    images = _parse_idx(_read_bytes(image_path), IDX_IMAGE_MAGIC, 3, image_path)
    labels = _parse_idx(_read_bytes(label_path), IDX_LABEL_MAGIC, 1, label_path)
    if len(images) != len(labels):
        raise FormatError(f"image count {len(images)} does not match label count {len(labels)}")
    logger.info(f"Loaded {len(images)} MNIST {split} samples from {Path(image_path).name}")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), split, 10)


def _load_cifar_records(paths: Iterable[PathLike], record: int, label_offset: int,
                        num_classes: int, split: str) -> Dataset:
    chunks: List[np.ndarray] = []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % record:
            raise FormatError(f"{path}: length {len(raw)} is not a multiple of the {record}-byte record size")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, record))
    if not chunks:
        raise FormatError("no CIFAR batch files given")
    records = np.concatenate(chunks)
    labels = records[:, label_offset].astype(np.int64)
    if labels.max() >= num_classes:
        raise FormatError(f"label {labels.max()} outside [0, {num_classes})")
    pixels = records[:, record - CIFAR_IMAGE_BYTES:].reshape(-1, 3, 32, 32)
    return Dataset(pixels.astype(np.float64) / 255.0, labels, split, num_classes)


def load_cifar10_binary(paths: Sequence[PathLike], split: str = "train") -> Dataset:
    """Read CIFAR-10 binary batches: 1 label byte + 3072 pixel bytes per record."""
    dataset = _load_cifar_records(paths, CIFAR10_RECORD, 0, 10, split)
    logger.info(f"Loaded {len(dataset)} CIFAR-10 {split} samples")
    return dataset


def load_cifar100_binary(paths: Sequence[PathLike], split: str = "train") -> Dataset:
    """Read CIFAR-100 binary files: coarse label, fine label, 3072 pixel bytes; keeps the fine label."""
    dataset = _load_cifar_records(paths, CIFAR100_RECORD, 1, 100, split)
    logger.info(f"Loaded {len(dataset)} CIFAR-100 {split} samples")
    return dataset


def _first_existing(directory: Path, names: Sequence[str]) -> Path:
    for name in names:
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"None of {list(names)} found in {directory}")


def load_mnist(data_dir: PathLike) -> Tuple[Dataset, Dataset]:
    """Load the standard MNIST train/test pair from ``data_dir`` (or ``data_dir/mnist``)."""
    root = Path(data_dir)
    if (root / "mnist").is_dir():
        root = root / "mnist"

    def find(prefix: str, kind: str) -> Path:
        return _first_existing(root, [f"{prefix}-{kind}-ubyte", f"{prefix}-{kind.replace('-', '.')}-ubyte"])

    train = load_mnist_idx(find("train", "images-idx3"), find("train", "labels-idx1"), "train")
    test = load_mnist_idx(find("t10k", "images-idx3"), find("t10k", "labels-idx1"), "test")
    return train, test


def load_cifar10(data_dir: PathLike) -> Tuple[Dataset, Dataset]:
    root = Path(data_dir) / "cifar-10-batches-bin"
    train = load_cifar10_binary([root / f"data_batch_{i}.bin" for i in range(1, 6)], "train")
    test = load_cifar10_binary([root / "test_batch.bin"], "test")
    return train, test


def load_cifar100(data_dir: PathLike) -> Tuple[Dataset, Dataset]:
    root = Path(data_dir) / "cifar-100-binary"
    return load_cifar100_binary([root / "train.bin"], "train"), load_cifar100_binary([root / "test.bin"], "test")


def mnist_available(data_dir: Optional[PathLike]) -> bool:
    """True when the four MNIST files can be found under ``data_dir``."""
    if not data_dir:
        return False
    try:
        load_paths = Path(data_dir)
        root = load_paths / "mnist" if (load_paths / "mnist").is_dir() else load_paths
        for prefix, kind in (("train", "images-idx3"), ("train", "labels-idx1"),
                             ("t10k", "images-idx3"), ("t10k", "labels-idx1")):
            _first_existing(root, [f"{prefix}-{kind}-ubyte", f"{prefix}-{kind.replace('-', '.')}-ubyte"])
    except FileNotFoundError:
        return False
    return True
