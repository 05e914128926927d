"""Pipeline stages of the static layer graph.

A network is an ordered list of these stages. Parameters are not stored on the
layers; they live in the owning network's ``params`` dictionary keyed by stable
ids, and each stage only knows which ids it reads. Forward passes cache what
the matching backward pass needs.
"""

import logging
from typing import Dict, Tuple

import numpy as np

from app.core import functional as F
from app.errors import DimensionError, StateError

logger = logging.getLogger(__name__)

GradientSet = Dict[str, np.ndarray]


class Layer:
    """A stage of the pipeline without parameters."""

    trainable = False

    def __init__(self, name: str):
        self.name = name
        self._cache = None

    def forward(self, x: np.ndarray, params: Dict[str, np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, params: Dict[str, np.ndarray]) -> Tuple[np.ndarray, GradientSet]:
        raise NotImplementedError

    def clear(self) -> None:
        self._cache = None

    def _require_cache(self):
        if self._cache is None:
            raise StateError(f"backward called on {self.name} without a recorded forward pass")
        return self._cache

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name})"


class ParamLayer(Layer):
    """A stage owning a weight and a bias, one neuron per output unit or channel."""

    trainable = True
    neuron_axis = 0

    @property
    def weight_id(self) -> str:
        return f"{self.name}.weight"

    @property
    def bias_id(self) -> str:
        return f"{self.name}.bias"

    @property
    def param_ids(self) -> Tuple[str, str]:
        return self.weight_id, self.bias_id

    @property
    def neurons(self) -> int:
        raise NotImplementedError

    @property
    def fan_in(self) -> int:
        raise NotImplementedError

    def weight_shape(self) -> Tuple[int, ...]:
        raise NotImplementedError

    def init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        """He-uniform weights, zero bias."""
        limit = np.sqrt(6.0 / self.fan_in)
        return {
            self.weight_id: rng.uniform(-limit, limit, size=self.weight_shape()),
            self.bias_id: np.zeros(self.neurons),
        }


class Dense(ParamLayer):
    neuron_axis = 1

    def __init__(self, name: str, in_features: int, out_features: int):
        super().__init__(name)
        self.in_features = in_features
        self.out_features = out_features

    @property
    def neurons(self) -> int:
        return self.out_features

    @property
    def fan_in(self) -> int:
        return self.in_features

    def weight_shape(self) -> Tuple[int, ...]:
        return (self.in_features, self.out_features)

    def forward(self, x, params):
        self._cache = x
        return F.dense_forward(x, params[self.weight_id], params[self.bias_id])

    def backward(self, dy, params):
        x = self._require_cache()
        dx, dw, db = F.dense_backward(dy, x, params[self.weight_id])
        return dx, {self.weight_id: dw, self.bias_id: db}


class Conv2D(ParamLayer):
    neuron_axis = 0

    def __init__(self, name: str, in_channels: int, out_channels: int,
                 kernel_size: int = 3, stride: int = 1, padding: int = 1):
        super().__init__(name)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding

    @property
    def neurons(self) -> int:
        return self.out_channels

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_size * self.kernel_size

    def weight_shape(self) -> Tuple[int, ...]:
        return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)

    def forward(self, x, params):
        self._cache = x
        return F.conv2d_forward(x, params[self.weight_id], params[self.bias_id], self.stride, self.padding)

    def backward(self, dy, params):
        x = self._require_cache()
        dx, dk, db = F.conv2d_backward(dy, x, params[self.weight_id], self.stride, self.padding)
        return dx, {self.weight_id: dk, self.bias_id: db}


class ReLU(Layer):
    def forward(self, x, params):
        self._cache = x
        return F.relu(x)

    def backward(self, dy, params):
        return F.relu_backward(dy, self._require_cache()), {}


class MaxPool2D(Layer):
    def __init__(self, name: str, size: int = 2):
        super().__init__(name)
        self.size = size

    def forward(self, x, params):
        out, index = F.max_pool2d_forward(x, self.size)
        self._cache = (index, x.shape)
        return out

    def backward(self, dy, params):
        index, shape = self._require_cache()
        return F.max_pool2d_backward(dy, index, shape, self.size), {}


class Flatten(Layer):
    def forward(self, x, params):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy, params):
        return dy.reshape(self._require_cache()), {}


def summarize_activation(x: np.ndarray) -> np.ndarray:
    """Per-neuron activation value of a post-ReLU output.

    Conv feature maps are reduced by global average pooling; dense outputs are
    already one value per neuron.
    """
    if x.ndim == 4:
        return F.global_avg_pool(x)
    if x.ndim == 2:
        return x
    raise DimensionError(f"cannot summarize activations of shape {x.shape}")
