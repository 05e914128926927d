"""Neuron importance from activation statistics and its per-parameter expansion.

Neuron importance is the layer-wise mean activation of a neuron over a task's
instances divided by its population standard deviation plus epsilon. The value
is copied to every incoming weight and to the bias of that neuron.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np
import pandas as pd

from app.errors import ContractError, DegenerateDistributionError, StateError
from app.importance.activation_stats import ActivationStats
from app.network.multihead import NeuronGroup

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-6
MERGE_POLICIES = ("max", "sum", "replace")
NORMALIZATIONS = ("std", "mean")


@dataclass
class ImportanceMap:
    """Per-parameter importance keyed by parameter id.

    ``neurons`` keeps the per-neuron values for methods that measure neurons;
    it is empty for the weight-level baselines.
    """

    params: Dict[str, np.ndarray]
    neurons: Dict[str, np.ndarray] = field(default_factory=dict)
    epsilon: float = DEFAULT_EPSILON
    method: str = "ours"

    @property
    def keys(self) -> List[str]:
        return list(self.params)

    def copy(self) -> "ImportanceMap":
        return ImportanceMap(
            params={k: v.copy() for k, v in self.params.items()},
            neurons={k: v.copy() for k, v in self.neurons.items()},
            epsilon=self.epsilon,
            method=self.method,
        )

    def to_frame(self) -> pd.DataFrame:
        """Long-form table with one row per parameter element."""
        frames = [
            pd.DataFrame({
                "param_id": pid,
                "layer": layer_of(pid),
                "index": np.arange(values.size),
                "importance": values.ravel(),
            })
            for pid, values in self.params.items()
        ]
        if not frames:
            return pd.DataFrame(columns=["param_id", "layer", "index", "importance"])
        return pd.concat(frames, ignore_index=True)

    def save(self, path: Union[str, Path]) -> Path:
        """Export ``param_id, layer, index, importance`` as CSV."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.10g")
        logger.info(f"Importance map written to {path}")
        return path


def layer_of(param_id: str) -> str:
    """Layer name of a parameter id (``trunk.3.weight`` -> ``trunk.3``)."""
    return param_id.rsplit(".", 1)[0]


def neuron_importance(
    stats: ActivationStats, epsilon: float = DEFAULT_EPSILON, normalize: str = "std"
) -> Dict[str, np.ndarray]:
    """
    Importance of every neuron from its activation statistics.

    Args:
        stats: Statistics over the instances of one task
        epsilon: Positive guard added to the standard deviation
        normalize: ``"std"`` for mean / (std + epsilon), ``"mean"`` for the plain mean activation

    Returns:
        Per-layer arrays of neuron importance
    """
    if stats.count < 1:
        raise StateError("cannot compute neuron importance from empty activation statistics")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if normalize not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {normalize!r}")

    if normalize == "mean":
        return {layer: mean.copy() for layer, mean in stats.mean.items()}
    std = stats.std()
    return {layer: mean / (std[layer] + epsilon) for layer, mean in stats.mean.items()}


def expand_to_weights(omega: Dict[str, np.ndarray], groups: Iterable[NeuronGroup]) -> Dict[str, np.ndarray]:
    """
    Assign each neuron's importance to all its incoming weights and its bias.

    Args:
        omega: Per-layer neuron importance
        groups: Topology of the regularized layers

    Returns:
        Importance array per parameter id, shaped like the parameter
    """
    expanded: Dict[str, np.ndarray] = {}
    for group in groups:
        if group.layer not in omega:
            raise ContractError(f"no neuron importance for layer {group.layer}")
        values = np.asarray(omega[group.layer], dtype=np.float64)
        if values.shape != (group.neurons,):
            raise ContractError(
                f"layer {group.layer} has {group.neurons} neurons but importance covers {values.shape}"
            )
        broadcast = [1] * len(group.weight_shape)
        broadcast[group.neuron_axis] = group.neurons
        expanded[group.weight_id] = np.broadcast_to(values.reshape(broadcast), group.weight_shape).copy()
        expanded[group.bias_id] = values.copy()
    return expanded


def importance_from_stats(
    stats: ActivationStats,
    groups: List[NeuronGroup],
    epsilon: float = DEFAULT_EPSILON,
    normalize: str = "std",
) -> ImportanceMap:
    """Neuron importance of a finished task, expanded to the regularized parameters."""
    omega = neuron_importance(stats, epsilon, normalize)
    params = expand_to_weights(omega, groups)
    return ImportanceMap(params=params, neurons=omega, epsilon=epsilon,
                         method="ours" if normalize == "std" else "mean")


def merge_task_importance(
    prev: Optional[ImportanceMap], new: ImportanceMap, policy: str = "max"
) -> ImportanceMap:
    """
    Combine the accumulated importance of earlier tasks with a new task's importance.

    Args:
        prev: Accumulated map, or None before the first task
        new: Importance measured on the task just finished
        policy: ``max`` (default), ``sum`` or ``replace``, applied elementwise

    Returns:
        Merged map over the same parameter ids
    """
    if policy not in MERGE_POLICIES:
        raise ValueError(f"unknown merge policy {policy!r} (expected one of {MERGE_POLICIES})")
    if prev is None or policy == "replace":
        if prev is not None and set(prev.params) != set(new.params):
            raise ContractError("importance maps cover different parameter ids")
        return new.copy()
    if set(prev.params) != set(new.params):
        raise ContractError(
            f"importance maps cover different parameter ids: "
            f"{sorted(set(prev.params).symmetric_difference(new.params))}"
        )

    combine = np.maximum if policy == "max" else np.add
    params = {pid: combine(prev.params[pid], new.params[pid]) for pid in new.params}
    neurons = {}
    if set(prev.neurons) == set(new.neurons):
        neurons = {layer: combine(prev.neurons[layer], new.neurons[layer]) for layer in new.neurons}
    return ImportanceMap(params=params, neurons=neurons, epsilon=new.epsilon, method=new.method)


def layer_importance_distribution(importance: ImportanceMap) -> pd.Series:
    """
    Share of total importance held by each layer.

    The share of a layer is its mean per-parameter importance, renormalized so
    that the shares of all layers sum to one.

    Returns:
        Series indexed by layer name, in parameter order
    """
    if not importance.params:
        raise DegenerateDistributionError("importance map is empty")
    totals: Dict[str, float] = {}
    counts: Dict[str, int] = {}
    for pid, values in importance.params.items():
        layer = layer_of(pid)
        totals[layer] = totals.get(layer, 0.0) + float(np.sum(values))
        counts[layer] = counts.get(layer, 0) + int(np.size(values))
    means = pd.Series({layer: totals[layer] / counts[layer] for layer in totals}, name="share")
    total = means.sum()
    if not np.isfinite(total) or total <= 0:
        raise DegenerateDistributionError("importance map has no positive mass to distribute")
    return means / total
