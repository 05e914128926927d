"""Architecture configuration of the multi-head network."""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Tuple

from app.errors import ConfigError

logger = logging.getLogger(__name__)

ARCHITECTURES = ("mlp", "conv6")


@dataclass(frozen=True)
class NetworkConfig:
    """Shape of the shared trunk and of every task head.

    ``hidden`` is used by the MLP; ``channels``, ``channel_multiplier`` and
    ``dense_width`` by the six-convolution network. With ``shared_head`` one
    output layer of ``classes_per_head`` units serves every task and is part of
    the regularized trunk.
    """

    kind: str = "mlp"
    input_shape: Tuple[int, ...] = (784,)
    hidden: Tuple[int, ...] = (400, 400)
    channels: Tuple[int, ...] = (32, 32, 64, 64, 128, 128)
    channel_multiplier: int = 1
    dense_width: int = 256
    classes_per_head: int = 2
    shared_head: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in ARCHITECTURES:
            raise ConfigError(f"unsupported architecture kind: {self.kind!r} (expected one of {ARCHITECTURES})")
        if not isinstance(self.channel_multiplier, int) or self.channel_multiplier < 1:
            raise ConfigError(f"channel_multiplier must be an integer >= 1, got {self.channel_multiplier!r}")
        if not self.input_shape or any(d < 1 for d in self.input_shape):
            raise ConfigError(f"input_shape must be positive, got {self.input_shape}")
        if self.classes_per_head < 1:
            raise ConfigError(f"classes_per_head must be positive, got {self.classes_per_head}")
        if self.kind == "mlp":
            if not self.hidden or any(w < 1 for w in self.hidden):
                raise ConfigError(f"hidden widths must be positive, got {self.hidden}")
        else:
            if len(self.channels) != 6 or any(c < 1 for c in self.channels):
                raise ConfigError(f"conv6 needs six positive channel counts, got {self.channels}")
            if self.dense_width < 1:
                raise ConfigError(f"dense_width must be positive, got {self.dense_width}")
            if len(self.input_shape) != 3:
                raise ConfigError(f"conv6 expects input_shape (channels, height, width), got {self.input_shape}")
            if min(self.input_shape[1:]) < 8:
                raise ConfigError(f"conv6 needs spatial size >= 8 for three 2x2 poolings, got {self.input_shape}")

    @property
    def scaled_channels(self) -> Tuple[int, ...]:
        return tuple(c * self.channel_multiplier for c in self.channels)

    @property
    def scaled_dense_width(self) -> int:
        return self.dense_width * self.channel_multiplier

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "NetworkConfig":
        data = dict(data)
        for key in ("input_shape", "hidden", "channels"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)
