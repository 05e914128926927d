"""Weight-level importance baselines: Fisher diagonal, path integral, output sensitivity.

All three return an ``ImportanceMap`` over the same regularized parameter ids as
the neuron-based importance, so the trainer can swap methods freely.
"""

import logging
from typing import Dict, Hashable, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from app.core import functional as F
from app.errors import ContractError, StateError
from app.importance.neuron_importance import ImportanceMap
from app.network.multihead import MultiHeadNetwork

logger = logging.getLogger(__name__)

DEFAULT_SI_DAMPING = 0.1


def _sample_indices(count: int, n_samples: Optional[int]) -> range:
    if count == 0:
        raise StateError("importance estimation needs at least one sample")
    return range(count if not n_samples else min(count, n_samples))


def _per_sample_gradients(
    net: MultiHeadNetwork, features: np.ndarray, task_id: Hashable, seed_gradient, n_samples: Optional[int]
) -> Iterator[Dict[str, np.ndarray]]:
    for i in _sample_indices(len(features), n_samples):
        logits = net.forward(features[i:i + 1], task_id)
        yield net.backward(seed_gradient(logits, i))


def ewc_fisher(
    net: MultiHeadNetwork,
    features: np.ndarray,
    labels: np.ndarray,
    task_id: Hashable,
    n_samples: Optional[int] = None,
    ids: Optional[List[str]] = None,
) -> ImportanceMap:
    """
    Empirical diagonal Fisher information.

    Args:
        net: Network with a head for ``task_id``
        features: Task inputs
        labels: Task labels (the empirical Fisher uses the observed label)
        task_id: Head to evaluate
        n_samples: Use only the first ``n_samples`` instances (all when None)
        ids: Parameter ids to report (regularized trunk by default)

    Returns:
        Mean over samples of the squared log-likelihood gradient
    """
    ids = net.trunk_param_ids if ids is None else ids
    labels = np.asarray(labels)
    fisher = {pid: np.zeros_like(net.params[pid]) for pid in ids}

    def nll_seed(logits, i):
        _, dlogits = F.softmax_cross_entropy(logits, labels[i:i + 1])
        return dlogits

    count = 0
    for grads in _per_sample_gradients(net, features, task_id, nll_seed, n_samples):
        for pid in ids:
            fisher[pid] += grads[pid] ** 2
        count += 1
    for pid in ids:
        fisher[pid] /= count
    logger.info(f"EWC Fisher diagonal estimated from {count} samples of task {task_id}")
    return ImportanceMap(params=fisher, method="ewc")


def mas_importance(
    net: MultiHeadNetwork,
    features: np.ndarray,
    task_id: Hashable,
    n_samples: Optional[int] = None,
    ids: Optional[List[str]] = None,
) -> ImportanceMap:
    """Mean over samples of |d ||output||^2 / dw|, the output sensitivity of each parameter."""
    ids = net.trunk_param_ids if ids is None else ids
    importance = {pid: np.zeros_like(net.params[pid]) for pid in ids}

    count = 0
    for grads in _per_sample_gradients(net, features, task_id, lambda logits, i: 2.0 * logits, n_samples):
        for pid in ids:
            importance[pid] += np.abs(grads[pid])
        count += 1
    for pid in ids:
        importance[pid] /= count
    logger.info(f"MAS importance estimated from {count} samples of task {task_id}")
    return ImportanceMap(params=importance, method="mas")


class PathIntegralTrace:
    """Online accumulation of -gradient * parameter-update along the training path."""

    def __init__(self, ids: Iterable[str], shapes: Dict[str, Tuple[int, ...]]):
        """
        Initialize an empty trace.

        Args:
            ids: Parameter ids to track
            shapes: Shape of every tracked parameter
        """
        self.ids = list(ids)
        self.omega = {pid: np.zeros(shapes[pid]) for pid in self.ids}
        self.steps = 0

    @classmethod
    def for_params(cls, params: Dict[str, np.ndarray], ids: Iterable[str]) -> "PathIntegralTrace":
        return cls(ids, {pid: params[pid].shape for pid in ids})

    def record(self, grads: Dict[str, np.ndarray], deltas: Dict[str, np.ndarray]) -> None:
        """Add one optimizer step: ``grads`` of the task loss and the resulting parameter ``deltas``."""
        missing = [pid for pid in self.ids if pid not in grads or pid not in deltas]
        if missing:
            raise ContractError(f"trace step misses parameter ids: {missing}")
        for pid in self.ids:
            if grads[pid].shape != self.omega[pid].shape or deltas[pid].shape != self.omega[pid].shape:
                raise ContractError(f"trace step for {pid} has mismatched shapes")
            self.omega[pid] -= grads[pid] * deltas[pid]
        self.steps += 1


def si_path_integral(
    trace: PathIntegralTrace,
    initial: Dict[str, np.ndarray],
    final: Dict[str, np.ndarray],
    damping: float = DEFAULT_SI_DAMPING,
) -> ImportanceMap:
    """
    Path-integral importance normalized by the total displacement.

    Args:
        trace: Accumulated -grad * delta per parameter
        initial: Parameters at the start of the task
        final: Parameters at the end of the task
        damping: Positive term added to the squared displacement

    Returns:
        max(omega / (displacement^2 + damping), 0) per parameter
    """
    if set(initial) != set(trace.ids) or set(final) != set(trace.ids):
        raise ContractError("trace, initial and final parameters cover different ids")
    importance = {}
    for pid in trace.ids:
        displacement = final[pid] - initial[pid]
        importance[pid] = np.maximum(trace.omega[pid] / (displacement ** 2 + damping), 0.0)
    logger.info(f"SI importance computed from {trace.steps} recorded steps")
    return ImportanceMap(params=importance, method="si")
