"""Multi-head network: a shared trunk plus one output head per task."""

import logging
import zlib
from dataclasses import dataclass
from typing import Dict, Hashable, List, Optional, Tuple

import numpy as np

from app.core import functional as F
from app.core.layers import (
    Conv2D,
    Dense,
    Flatten,
    GradientSet,
    Layer,
    MaxPool2D,
    ParamLayer,
    ReLU,
    summarize_activation,
)
from app.errors import StateError, UnknownHeadError
from app.network.config import NetworkConfig

logger = logging.getLogger(__name__)

ActivationSummary = Dict[str, np.ndarray]


@dataclass(frozen=True)
class NeuronGroup:
    """Topology record of one regularized layer.

    Neuron ``k`` of the layer owns the slice ``k`` of ``weight_id`` along
    ``neuron_axis`` (its incoming edges) and element ``k`` of ``bias_id``.
    """

    layer: str
    weight_id: str
    bias_id: str
    neurons: int
    neuron_axis: int
    fan_in: int
    weight_shape: Tuple[int, ...]


def head_key(task_id: Hashable) -> str:
    return str(task_id)


def head_seed(seed: int, task_id: Hashable) -> List[int]:
    return [seed, zlib.crc32(head_key(task_id).encode("utf-8"))]


class MultiHeadNetwork:
    """Shared trunk with lazily added per-task heads.

    All parameters live in ``self.params`` keyed by stable ids
    (``trunk.<i>.weight``, ``head.<task>.bias``, ...). Ids never change after
    construction, head addition or trunk re-initialization.
    """

    def __init__(self, config: NetworkConfig):
        """
        Initialize the network and sample the trunk.

        Args:
            config: Architecture description, including the initialization seed
        """
        self.config = config
        self.params: Dict[str, np.ndarray] = {}
        self.trunk: List[Layer] = self._build_trunk()
        self.heads: Dict[str, Optional[Dense]] = {}
        self._active_head: Optional[str] = None
        self.reinitialize_trunk(config.seed)
        logger.debug(f"Built {config.kind} trunk with {self.trunk_param_count} parameters")

    # ------------------------------------------------------------------ build

    def _build_trunk(self) -> List[Layer]:
        config = self.config
        layers: List[Layer] = []
        index = 0

        def param_name() -> str:
            nonlocal index
            name = f"trunk.{index}"
            index += 1
            return name

        if config.kind == "mlp":
            layers.append(Flatten("flatten"))
            width = int(np.prod(config.input_shape))
            for out in config.hidden:
                layers.append(Dense(param_name(), width, out))
                layers.append(ReLU(f"relu{index - 1}"))
                width = out
        else:
            cin, h, w = config.input_shape
            for block in range(3):
                for cout in config.scaled_channels[2 * block:2 * block + 2]:
                    layers.append(Conv2D(param_name(), cin, cout, kernel_size=3, stride=1, padding=1))
                    layers.append(ReLU(f"relu{index - 1}"))
                    cin = cout
                layers.append(MaxPool2D(f"pool{block}", 2))
                h, w = h // 2, w // 2
            layers.append(Flatten("flatten"))
            width = cin * h * w
            layers.append(Dense(param_name(), width, config.scaled_dense_width))
            layers.append(ReLU(f"relu{index - 1}"))
            width = config.scaled_dense_width

        if config.shared_head:
            layers.append(Dense(param_name(), width, config.classes_per_head))
            width = config.classes_per_head
        self.feature_width = width
        return layers

    @property
    def param_layers(self) -> List[ParamLayer]:
        return [layer for layer in self.trunk if layer.trainable]

    @property
    def trunk_param_ids(self) -> List[str]:
        return [pid for layer in self.param_layers for pid in layer.param_ids]

    @property
    def trunk_param_count(self) -> int:
        return int(sum(self.params[pid].size for pid in self.trunk_param_ids))

    def neuron_groups(self) -> List[NeuronGroup]:
        """Incoming-edge groups of every regularized neuron, in layer order."""
        return [
            NeuronGroup(layer.name, layer.weight_id, layer.bias_id,
                        layer.neurons, layer.neuron_axis, layer.fan_in, layer.weight_shape())
            for layer in self.param_layers
        ]

    def head_param_ids(self, task_id: Hashable) -> List[str]:
        head = self._head(task_id)
        return [] if head is None else list(head.param_ids)

    def trainable_ids(self, task_id: Hashable) -> List[str]:
        """Parameters updated while training ``task_id``: the trunk and that task's head."""
        return self.trunk_param_ids + self.head_param_ids(task_id)

    def snapshot(self, ids: Optional[List[str]] = None) -> Dict[str, np.ndarray]:
        ids = self.trunk_param_ids if ids is None else ids
        return {pid: self.params[pid].copy() for pid in ids}

    # ------------------------------------------------------------- mutation

    def add_head(self, task_id: Hashable, classes: Optional[int] = None) -> "MultiHeadNetwork":
        """Register a task. In multi-head mode a fresh seeded output layer is created."""
        key = head_key(task_id)
        if key in self.heads:
            raise StateError(f"head for task {task_id!r} already exists")
        if self.config.shared_head:
            self.heads[key] = None
            return self

        classes = classes or self.config.classes_per_head
        head = Dense(f"head.{key}", self.feature_width, classes)
        rng = np.random.default_rng(head_seed(self.config.seed, task_id))
        self.params.update(head.init_params(rng))
        self.heads[key] = head
        logger.debug(f"Added head for task {key} with {classes} outputs")
        return self

    def has_head(self, task_id: Hashable) -> bool:
        return head_key(task_id) in self.heads

    def reinitialize_trunk(self, seed: int) -> "MultiHeadNetwork":
        """Resample every trunk parameter from the seeded He-uniform scheme; heads are untouched."""
        rng = np.random.default_rng(seed)
        for layer in self.param_layers:
            self.params.update(layer.init_params(rng))
        return self

    # -------------------------------------------------------------- passes

    def _head(self, task_id: Hashable) -> Optional[Dense]:
        key = head_key(task_id)
        if key not in self.heads:
            raise UnknownHeadError(f"no head for task {task_id!r}")
        return self.heads[key]

    def forward(self, batch: np.ndarray, task_id: Hashable) -> np.ndarray:
        logits, _ = self._run(batch, task_id, collect=False)
        return logits

    def forward_with_activations(self, batch: np.ndarray, task_id: Hashable) -> Tuple[np.ndarray, ActivationSummary]:
        """Forward pass that also reports one non-negative value per regularized neuron.

        Conv channels are summarized by global average pooling of the post-ReLU
        map, dense units by their post-ReLU output. A shared output layer is
        summarized through an extra ReLU on its outputs.
        """
        return self._run(batch, task_id, collect=True)

    def _run(self, batch: np.ndarray, task_id: Hashable, collect: bool) -> Tuple[np.ndarray, ActivationSummary]:
        head = self._head(task_id)
        x = np.asarray(batch, dtype=np.float64)
        summary: ActivationSummary = {}
        last: Optional[ParamLayer] = None
        for layer in self.trunk:
            x = layer.forward(x, self.params)
            if layer.trainable:
                last = layer
            elif collect and isinstance(layer, ReLU) and last is not None:
                summary[last.name] = summarize_activation(x)
                last = None
        if collect and last is not None:
            summary[last.name] = F.relu(x)
        logits = x if head is None else head.forward(x, self.params)
        self._active_head = head_key(task_id)
        return logits, summary

    def backward(self, dlogits: np.ndarray) -> GradientSet:
        """Reverse-mode gradients for the trunk and the head of the recorded forward pass."""
        if self._active_head is None:
            raise StateError("backward called without a recorded forward pass")
        head = self.heads[self._active_head]
        grads: GradientSet = {}
        dx = dlogits
        if head is not None:
            dx, head_grads = head.backward(dx, self.params)
            grads.update(head_grads)
        for layer in reversed(self.trunk):
            dx, layer_grads = layer.backward(dx, self.params)
            grads.update(layer_grads)
        self._active_head = None
        return grads

    def predict(self, features: np.ndarray, task_id: Hashable, batch_size: int = 1000) -> np.ndarray:
        """Argmax class of every sample, evaluated in chunks."""
        predictions = [
            self.forward(features[start:start + batch_size], task_id).argmax(axis=1)
            for start in range(0, len(features), batch_size)
        ]
        self._active_head = None
        return np.concatenate(predictions) if predictions else np.zeros(0, dtype=int)


def build_network(config: NetworkConfig) -> MultiHeadNetwork:
    """Build the trunk described by ``config``; heads are added per task."""
    return MultiHeadNetwork(config)
