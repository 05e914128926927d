"""Shared fixtures: tiny networks, synthetic tasks and crafted dataset files."""

import os
import struct
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from app.data.datasets import mnist_available  # noqa: E402
from app.network.config import NetworkConfig  # noqa: E402

DATA_DIR = os.getenv("DATA_DIR")
requires_mnist = pytest.mark.skipif(not mnist_available(DATA_DIR), reason="MNIST files not found under DATA_DIR")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_mlp_config():
    return NetworkConfig(kind="mlp", input_shape=(6,), hidden=(5, 4), classes_per_head=2, seed=3)


@pytest.fixture
def tiny_conv_config():
    return NetworkConfig(kind="conv6", input_shape=(1, 8, 8), channels=(2, 2, 3, 3, 4, 4),
                         dense_width=5, classes_per_head=3, seed=5)


def idx_bytes(magic: int, dims, payload) -> bytes:
    """Big-endian IDX header followed by raw unsigned bytes."""
    header = struct.pack(f">{1 + len(dims)}I", magic, *dims)
    return header + bytes(np.asarray(payload, dtype=np.uint8).ravel())


@pytest.fixture
def write_idx(tmp_path):
    """Write an IDX image/label pair and return both paths."""

    def write(images, labels, image_magic=2051, label_magic=2049, name="train"):
        images = np.asarray(images, dtype=np.uint8)
        labels = np.asarray(labels, dtype=np.uint8)
        image_path = tmp_path / f"{name}-images-idx3-ubyte"
        label_path = tmp_path / f"{name}-labels-idx1-ubyte"
        image_path.write_bytes(idx_bytes(image_magic, images.shape, images))
        label_path.write_bytes(idx_bytes(label_magic, labels.shape, labels))
        return image_path, label_path

    return write
