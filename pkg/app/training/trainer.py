"""Sequential multi-task training with an importance-weighted anchor penalty.

The loss of task t is the cross-entropy of its head plus
``alpha * sum(omega * (w - w_anchor) ** 2)`` over the trunk parameters, where
the anchors are the trunk weights at the end of the previous task and omega
is the importance accumulated over the tasks learned so far.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Hashable, List, Optional, Sequence, Union

import numpy as np

from app.core import functional as F
from app.core.optim import AdamState, adam_step
from app.data.tasks import TaskSequence, TaskSpec
from app.errors import ContractError, StateError
from app.harness.metrics import AccuracyMatrix
from app.importance.activation_stats import collect_activation_stats
from app.importance.baselines import PathIntegralTrace, ewc_fisher, mas_importance, si_path_integral
from app.importance.neuron_importance import (
    ImportanceMap,
    importance_from_stats,
    layer_importance_distribution,
    merge_task_importance,
)
from app.network.checkpoint import save_checkpoint
from app.network.multihead import MultiHeadNetwork
from app.training.config import TrainConfig

logger = logging.getLogger(__name__)

AnchorWeights = Dict[str, np.ndarray]
REINIT_SALT = 104729


def _check_penalty_keys(params: Dict[str, np.ndarray], anchors: AnchorWeights, importance: ImportanceMap) -> None:
    if set(anchors) != set(importance.params):
        raise ContractError(
            f"anchors and importance cover different ids: "
            f"{sorted(set(anchors).symmetric_difference(importance.params))}"
        )
    missing = set(anchors) - set(params)
    if missing:
        raise ContractError(f"parameters missing for anchored ids {sorted(missing)}")


def regularization_penalty(params: Dict[str, np.ndarray], anchors: AnchorWeights, importance: ImportanceMap) -> float:
    """
    Importance-weighted squared distance of the parameters from their anchors.

    Args:
        params: Current parameters (may hold more ids than the anchors)
        anchors: Parameter values at the end of the previous task
        importance: Per-parameter importance over the same ids as ``anchors``

    Returns:
        sum(omega * (anchor - w) ** 2), a non-negative scalar
    """
    _check_penalty_keys(params, anchors, importance)
    return float(sum(
        np.sum(importance.params[pid] * (anchors[pid] - params[pid]) ** 2) for pid in sorted(anchors)
    ))


def penalty_gradient(
    params: Dict[str, np.ndarray], anchors: AnchorWeights, importance: ImportanceMap, alpha: float
) -> Dict[str, np.ndarray]:
    """Gradient of ``alpha * regularization_penalty``: 2 * alpha * omega * (w - anchor)."""
    _check_penalty_keys(params, anchors, importance)
    return {pid: 2.0 * alpha * importance.params[pid] * (params[pid] - anchors[pid]) for pid in anchors}


@dataclass
class TrainerState:
    """Everything carried from one task to the next."""

    network: MultiHeadNetwork
    anchors: Optional[AnchorWeights] = None
    importance: Optional[ImportanceMap] = None
    completed: List[TaskSpec] = field(default_factory=list)

    @property
    def penalized(self) -> bool:
        return self.anchors is not None and self.importance is not None


@dataclass
class LossResult:
    loss: float
    task_loss: float
    penalty: float
    grads: Dict[str, np.ndarray]
    task_grads: Dict[str, np.ndarray]


@dataclass
class TaskResult:
    """Training trace of one learning step."""

    task_id: str
    learning_step: int
    epoch_losses: List[float] = field(default_factory=list)
    accuracies: Dict[str, float] = field(default_factory=dict)
    first_batch_penalty: float = 0.0
    wall_time: float = 0.0

    @property
    def own_accuracy(self) -> float:
        return self.accuracies[self.task_id]


def total_loss(
    state: TrainerState, features: np.ndarray, labels: np.ndarray, task_id: Hashable, config: TrainConfig
) -> LossResult:
    """
    Cross-entropy of the task head plus the scaled anchor penalty, with gradients.

    Args:
        state: Trainer state holding the network, anchors and importance
        features: Mini-batch inputs
        labels: Mini-batch labels of the task head
        task_id: Head to use
        config: Supplies alpha

    Returns:
        LossResult; ``task_grads`` are the cross-entropy gradients alone
    """
    net = state.network
    logits = net.forward(features, task_id)
    task_loss, dlogits = F.softmax_cross_entropy(logits, labels)
    task_grads = net.backward(dlogits)

    if not state.penalized or config.alpha == 0:
        return LossResult(task_loss, task_loss, 0.0, task_grads, task_grads)

    penalty = regularization_penalty(net.params, state.anchors, state.importance)
    extra = penalty_gradient(net.params, state.anchors, state.importance, config.alpha)
    grads = dict(task_grads)
    for pid, grad in extra.items():
        grads[pid] = task_grads[pid] + grad
    return LossResult(task_loss + config.alpha * penalty, task_loss, penalty, grads, task_grads)


def evaluate(net: MultiHeadNetwork, task: TaskSpec, task_id: Optional[Hashable] = None) -> float:
    """Percentage of test samples whose argmax prediction under the task's head is correct."""
    features, labels = task.test_data()
    predictions = net.predict(features, task.name if task_id is None else task_id)
    return float(np.mean(predictions == labels) * 100.0)


class ContinualTrainer:
    """Trains a network over a task sequence and records the accuracy matrix."""

    def __init__(self, network: MultiHeadNetwork, config: TrainConfig,
                 artifact_dir: Optional[Union[str, Path]] = None):
        """
        Initialize the trainer.

        Args:
            network: Freshly built network (heads are added per task)
            config: Training settings
            artifact_dir: Directory for per-step checkpoints and importance exports
        """
        self.config = config
        self.state = TrainerState(network=network)
        self.artifact_dir = Path(artifact_dir) if artifact_dir else None
        self.results: List[TaskResult] = []
        if config.reinit and not config.regularized:
            logger.warning("Trunk re-initialization without an active penalty discards all earlier learning")

    @property
    def network(self) -> MultiHeadNetwork:
        return self.state.network

    def reinit_seed(self, step: int) -> List[int]:
        return [self.config.seed, REINIT_SALT, step]

    def train_task(self, task: TaskSpec) -> TaskResult:
        """
        Learn one task and fold its importance into the trainer state.

        Args:
            task: Task to learn; its name identifies the head

        Returns:
            TaskResult with per-epoch losses and the accuracies on all tasks seen so far
        """
        config = self.config
        state = self.state
        net = state.network
        step = len(state.completed)
        started = time.perf_counter()

        features, labels = task.train_data()
        if len(features) == 0:
            raise StateError(f"task {task.name} has no training data")

        if config.reinit and step > 0:
            net.reinitialize_trunk(self.reinit_seed(step))
            logger.debug(f"Trunk re-initialized before step {step + 1}")
        net.add_head(task.name, task.num_classes)

        ids = net.trainable_ids(task.name)
        adam = AdamState.for_params(net.params, ids, lr=config.lr, beta1=config.beta1, beta2=config.beta2)
        trunk_ids = net.trunk_param_ids
        trace = PathIntegralTrace.for_params(net.params, trunk_ids) if config.method == "si" else None
        start_weights = net.snapshot(trunk_ids)

        result = TaskResult(task_id=task.name, learning_step=step + 1)
        n = len(features)
        for epoch in range(config.epochs):
            order = np.random.default_rng([config.seed, step, epoch]).permutation(n)
            running = 0.0
            for start in range(0, n, config.batch_size):
                batch = order[start:start + config.batch_size]
                loss = total_loss(state, features[batch], labels[batch], task.name, config)
                if epoch == 0 and start == 0:
                    result.first_batch_penalty = loss.penalty
                before = net.snapshot(trunk_ids) if trace is not None else None
                adam_step(net.params, {pid: loss.grads[pid] for pid in ids}, adam)
                if trace is not None:
                    trace.record(
                        {pid: loss.task_grads[pid] for pid in trunk_ids},
                        {pid: net.params[pid] - before[pid] for pid in trunk_ids},
                    )
                running += loss.loss * len(batch)
            result.epoch_losses.append(running / n)
            logger.info(f"Task {task.name} epoch {epoch + 1}/{config.epochs}: loss {running / n:.4f}")

        state.anchors = net.snapshot(trunk_ids)
        if config.method != "none":
            new_importance = self._task_importance(task, features, labels, trace, start_weights)
            state.importance = merge_task_importance(state.importance, new_importance, config.merge_policy)
        state.completed.append(task)

        for seen in state.completed:
            result.accuracies[seen.name] = evaluate(net, seen)
        result.wall_time = time.perf_counter() - started
        self.results.append(result)
        logger.info(f"Finished task {task.name} (step {step + 1}): own accuracy {result.own_accuracy:.2f}%")
        self._write_artifacts(step + 1)
        return result

    def _task_importance(self, task: TaskSpec, features: np.ndarray, labels: np.ndarray,
                         trace: Optional[PathIntegralTrace], start_weights: AnchorWeights) -> ImportanceMap:
        config = self.config
        net = self.state.network
        samples = config.importance_samples or None
        if config.method in ("ours", "mean"):
            stats = collect_activation_stats(net, features, task.name, config.batch_size)
            normalize = "std" if config.method == "ours" else "mean"
            importance = importance_from_stats(stats, net.neuron_groups(), config.epsilon, normalize)
        elif config.method == "ewc":
            importance = ewc_fisher(net, features, labels, task.name, samples)
        elif config.method == "mas":
            importance = mas_importance(net, features, task.name, samples)
        else:
            importance = si_path_integral(trace, start_weights, self.state.anchors, config.si_damping)
        logger.info(f"Computed {importance.method} importance for task {task.name}")
        return importance

    def _write_artifacts(self, step: int) -> None:
        if self.artifact_dir is None:
            return
        if self.config.save_checkpoints:
            save_checkpoint(self.network, self.artifact_dir / f"step{step}.npz")
        if self.config.export_importance and self.state.importance is not None:
            self.state.importance.save(self.artifact_dir / f"importance_step{step}.csv")
            distribution = layer_importance_distribution(self.state.importance)
            distribution.rename_axis("layer").to_csv(
                self.artifact_dir / f"layer_share_step{step}.csv", float_format="%.6f"
            )

    def run_sequence(self, tasks: Union[TaskSequence, Sequence[TaskSpec]]) -> AccuracyMatrix:
        """
        Train the tasks in order, evaluating every seen task after each step.

        Returns:
            AccuracyMatrix with cell (k, j) = accuracy of task k after step j
        """
        tasks = list(tasks.tasks if isinstance(tasks, TaskSequence) else tasks)
        if not tasks:
            raise StateError("cannot run an empty task sequence")
        matrix = AccuracyMatrix([task.name for task in tasks])
        for step, task in enumerate(tasks):
            result = self.train_task(task)
            for task_pos in range(step + 1):
                matrix.record(task_pos, step, result.accuracies[tasks[task_pos].name])
        return matrix
