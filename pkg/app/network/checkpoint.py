"""Network checkpoints: shapes, ids and float64 values in a versioned ``.npz`` archive."""

import json
import logging
from pathlib import Path
from typing import Union

import numpy as np

from app.errors import FormatError
from app.network.config import NetworkConfig
from app.network.multihead import MultiHeadNetwork

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_META_KEY = "__meta__"


def save_checkpoint(net: MultiHeadNetwork, path: Union[str, Path]) -> Path:
    """
    Write every parameter of the network plus the metadata needed to rebuild it.

    Args:
        net: Network to dump
        path: Destination file (``.npz`` is appended by numpy if missing)

    Returns:
        Path of the written file
    """
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "heads": {key: (None if head is None else head.out_features) for key, head in net.heads.items()},
    }
    np.savez(path, **{_META_KEY: np.array(json.dumps(meta))}, **net.params)
    logger.info(f"Checkpoint written to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> MultiHeadNetwork:
    """Rebuild a network from a checkpoint; values round-trip bitwise."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if _META_KEY not in archive.files:
            raise FormatError(f"{path} is not a network checkpoint")
        meta = json.loads(str(archive[_META_KEY]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {meta.get('version')}")
        net = MultiHeadNetwork(NetworkConfig.from_dict(meta["config"]))
        for key, classes in meta["heads"].items():
            net.add_head(key, classes)
        stored = {name: archive[name] for name in archive.files if name != _META_KEY}

    if set(stored) != set(net.params):
        raise FormatError(f"checkpoint parameter ids do not match the rebuilt network: {path}")
    for pid, value in stored.items():
        if value.shape != net.params[pid].shape:
            raise FormatError(f"shape mismatch for {pid}: {value.shape} vs {net.params[pid].shape}")
        net.params[pid] = value.astype(np.float64, copy=True)
    return net
