"""Streaming per-neuron activation statistics over the instances of one task."""

import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from app.errors import ContractError

logger = logging.getLogger(__name__)


@dataclass
class ActivationStats:
    """Running count, mean and sum of squared deviations per neuron, per layer.

    Batches are merged with the pairwise (Chan et al.) update, so the result
    equals the two-pass mean and population variance of all instances seen.
    """

    count: int = 0
    mean: Dict[str, np.ndarray] = field(default_factory=dict)
    m2: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def layers(self):
        return list(self.mean)

    def variance(self) -> Dict[str, np.ndarray]:
        """Population variance (divide by the instance count), clipped at zero."""
        if self.count == 0:
            return {layer: np.zeros_like(m) for layer, m in self.mean.items()}
        return {layer: np.maximum(m2 / self.count, 0.0) for layer, m2 in self.m2.items()}

    def std(self) -> Dict[str, np.ndarray]:
        return {layer: np.sqrt(var) for layer, var in self.variance().items()}

    def copy(self) -> "ActivationStats":
        return ActivationStats(
            count=self.count,
            mean={k: v.copy() for k, v in self.mean.items()},
            m2={k: v.copy() for k, v in self.m2.items()},
        )


def _check_neuron_sets(stats: ActivationStats, summary: Dict[str, np.ndarray]) -> int:
    if not summary:
        raise ContractError("activation summary is empty")
    sizes = {np.asarray(values).shape[0] for values in summary.values()}
    if len(sizes) != 1:
        raise ContractError(f"summary layers disagree on the batch size: {sorted(sizes)}")
    if stats.count == 0 and not stats.mean:
        return sizes.pop()
    if set(summary) != set(stats.mean):
        raise ContractError(
            f"summary layers {sorted(summary)} do not match accumulated layers {sorted(stats.mean)}"
        )
    for layer, values in summary.items():
        if np.asarray(values).shape[1:] != stats.mean[layer].shape:
            raise ContractError(
                f"layer {layer}: summary has {np.asarray(values).shape[1:]} neurons, "
                f"stats have {stats.mean[layer].shape}"
            )
    return sizes.pop()


def accumulate_activation_stats(stats: ActivationStats, summary: Dict[str, np.ndarray]) -> ActivationStats:
    """
    Merge one batch of activation values into the running statistics.

    Args:
        stats: Statistics accumulated so far (may be empty)
        summary: Per-layer arrays of shape (batch, neurons)

    Returns:
        New statistics covering the previous instances plus this batch
    """
    batch = _check_neuron_sets(stats, summary)
    merged = stats.copy()
    if batch == 0:
        return merged

    total = merged.count + batch
    for layer, values in summary.items():
        values = np.asarray(values, dtype=np.float64)
        batch_mean = values.mean(axis=0)
        batch_m2 = ((values - batch_mean) ** 2).sum(axis=0)
        if merged.count == 0:
            merged.mean[layer] = batch_mean
            merged.m2[layer] = batch_m2
            continue
        delta = batch_mean - merged.mean[layer]
        merged.mean[layer] = merged.mean[layer] + delta * (batch / total)
        merged.m2[layer] = merged.m2[layer] + batch_m2 + delta ** 2 * (merged.count * batch / total)
    merged.count = total
    return merged


def collect_activation_stats(net, features: np.ndarray, task_id, batch_size: int = 256) -> ActivationStats:
    """One inference pass over ``features`` accumulating the network's activation summaries."""
    stats = ActivationStats()
    for start in range(0, len(features), batch_size):
        _, summary = net.forward_with_activations(features[start:start + batch_size], task_id)
        stats = accumulate_activation_stats(stats, summary)
    logger.debug(f"Collected activation statistics over {stats.count} instances of task {task_id}")
    return stats
