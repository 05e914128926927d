"""Task construction (class splits, pixel permutations, synthetic clusters) and task orders."""

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.data.datasets import Dataset
from app.errors import ConfigError, StateError

logger = logging.getLogger(__name__)

ORDER_SEED_SALT = 7919


@dataclass
class TaskSpec:
    """One task of a sequence.

    The task keeps references to the underlying dataset splits plus the row
    selection, label remap and optional pixel permutation; features are
    materialized on demand.
    """

    task_id: int
    name: str
    kind: str
    train_source: Dataset
    test_source: Dataset
    num_classes: int
    classes: Tuple[int, ...] = ()
    train_index: Optional[np.ndarray] = None
    test_index: Optional[np.ndarray] = None
    label_map: Optional[np.ndarray] = None
    permutation: Optional[np.ndarray] = None
    permutation_seed: Optional[int] = None

    @property
    def input_shape(self) -> Tuple[int, ...]:
        if self.permutation is not None:
            return (self.permutation.size,)
        return self.train_source.input_shape

    def _materialize(self, source: Dataset, index: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        features = source.features if index is None else source.features[index]
        labels = source.labels if index is None else source.labels[index]
        if self.permutation is not None:
            features = features.reshape(len(features), -1)[:, self.permutation]
        if self.label_map is not None:
            labels = self.label_map[labels]
        if len(labels) == 0:
            raise StateError(f"task {self.name} has no {source.split} samples")
        return features, labels

    def train_data(self) -> Tuple[np.ndarray, np.ndarray]:
        return self._materialize(self.train_source, self.train_index)

    def test_data(self) -> Tuple[np.ndarray, np.ndarray]:
        return self._materialize(self.test_source, self.test_index)

    @property
    def train_size(self) -> int:
        return len(self.train_source) if self.train_index is None else len(self.train_index)

    @property
    def test_size(self) -> int:
        return len(self.test_source) if self.test_index is None else len(self.test_index)

    def limited(self, max_train: int = 0, max_test: int = 0) -> "TaskSpec":
        """Copy that keeps only the first ``max_train``/``max_test`` samples (0 keeps all)."""

        def cut(index: Optional[np.ndarray], size: int, limit: int) -> Optional[np.ndarray]:
            if not limit or limit >= size:
                return index
            return (np.arange(size) if index is None else index)[:limit]

        return replace(
            self,
            train_index=cut(self.train_index, self.train_size, max_train),
            test_index=cut(self.test_index, self.test_size, max_test),
        )


@dataclass
class TaskSequence:
    """An ordered permutation of a task set."""

    order_id: int
    tasks: List[TaskSpec] = field(default_factory=list)
    seed: int = 0

    @property
    def order(self) -> List[str]:
        return [task.name for task in self.tasks]

    def __len__(self) -> int:
        return len(self.tasks)


def _remap_table(group: Sequence[int], num_classes: int) -> np.ndarray:
    table = np.full(num_classes, -1, dtype=np.int64)
    table[list(group)] = np.arange(len(group))
    return table


def split_by_classes(train: Dataset, test: Dataset, groups: Sequence[Sequence[int]]) -> List[TaskSpec]:
    """
    Build one task per class group with labels remapped to 0..len(group)-1.

    Args:
        train: Training split
        test: Test split, filtered with the same groups
        groups: Disjoint class lists, e.g. [[0, 1], [2, 3], ...]

    Returns:
        Tasks in group order, ``task_id`` = group position
    """
    seen = set()
    for group in groups:
        if not group:
            raise ConfigError("class groups must not be empty")
        overlap = seen.intersection(group)
        if overlap or len(set(group)) != len(group):
            raise ConfigError(f"class groups overlap on {sorted(overlap) or list(group)}")
        seen.update(group)

    tasks = []
    for task_id, group in enumerate(groups):
        group = tuple(int(c) for c in group)
        for dataset in (train, test):
            missing = [c for c in group if c >= dataset.num_classes or not np.any(dataset.labels == c)]
            if missing:
                raise ConfigError(f"classes {missing} are not present in the {dataset.split} split")
        tasks.append(TaskSpec(
            task_id=task_id,
            name="-".join(str(c) for c in group),
            kind="classes",
            train_source=train,
            test_source=test,
            num_classes=len(group),
            classes=group,
            train_index=np.flatnonzero(np.isin(train.labels, group)),
            test_index=np.flatnonzero(np.isin(test.labels, group)),
            label_map=_remap_table(group, train.num_classes),
        ))
    logger.info(f"Split {len(train)} samples into {len(tasks)} class tasks")
    return tasks


def whole_dataset_task(train: Dataset, test: Dataset, task_id: int, name: str) -> TaskSpec:
    """A task covering every class of the dataset with the identity label map."""
    return TaskSpec(
        task_id=task_id,
        name=name,
        kind="classes",
        train_source=train,
        test_source=test,
        num_classes=train.num_classes,
        classes=tuple(range(train.num_classes)),
    )


def split_cifar10_100(
    cifar10: Tuple[Dataset, Dataset], cifar100: Tuple[Dataset, Dataset], n_tasks: int = 11
) -> List[TaskSpec]:
    """Task 0 is all of CIFAR-10; each further task takes ten consecutive CIFAR-100 classes."""
    if not 1 <= n_tasks <= 11:
        raise ConfigError(f"split_cifar10_100 supports 1 to 11 tasks, got {n_tasks}")
    tasks = [whole_dataset_task(cifar10[0], cifar10[1], 0, "cifar10")]
    groups = [list(range(10 * g, 10 * g + 10)) for g in range(n_tasks - 1)]
    for task in split_by_classes(cifar100[0], cifar100[1], groups) if groups else []:
        tasks.append(replace(task, task_id=task.task_id + 1, name=f"cifar100:{task.classes[0]}-{task.classes[-1]}"))
    return tasks


def pixel_permutation(size: int, seed: Optional[int]) -> np.ndarray:
    """Seeded permutation of ``size`` input positions; ``None`` gives the identity."""
    if seed is None:
        return np.arange(size)
    return np.random.default_rng(seed).permutation(size)


def permute_pixels(train: Dataset, test: Dataset, seed: Optional[int], task_id: int = 0) -> TaskSpec:
    """One task whose flattened inputs are reordered by a fixed seeded permutation."""
    size = int(np.prod(train.input_shape))
    if int(np.prod(test.input_shape)) != size:
        raise ConfigError("train and test inputs have different sizes")
    return TaskSpec(
        task_id=task_id,
        name=f"perm{task_id}",
        kind="permutation",
        train_source=train,
        test_source=test,
        num_classes=train.num_classes,
        classes=tuple(range(train.num_classes)),
        permutation=pixel_permutation(size, seed),
        permutation_seed=seed,
    )


def permuted_tasks(train: Dataset, test: Dataset, n_tasks: int, seed: int) -> List[TaskSpec]:
    """Task 0 sees the original pixel order; every later task a different seeded permutation."""
    if n_tasks < 1:
        raise ConfigError(f"n_tasks must be positive, got {n_tasks}")
    tasks = [permute_pixels(train, test, None, 0)]
    for task_id in range(1, n_tasks):
        task_seed = int(np.random.SeedSequence([seed, task_id]).generate_state(1)[0])
        tasks.append(permute_pixels(train, test, task_seed, task_id))
    return tasks


def synthetic_gaussian_tasks(
    n_tasks: int = 5,
    dims: int = 20,
    classes_per_task: int = 2,
    train_samples: int = 500,
    test_samples: int = 200,
    spread: float = 4.0,
    seed: int = 0,
) -> List[TaskSpec]:
    """
    Gaussian class clusters with unit noise and task-specific class means.

    The class means of a task are ``spread / sqrt(2)`` times orthonormal random
    directions, so any two class means of a task lie exactly ``spread`` apart.

    Args:
        n_tasks: Number of tasks
        dims: Input dimensionality (at least ``classes_per_task``)
        classes_per_task: Classes per task
        train_samples: Training samples per task, balanced over classes
        test_samples: Test samples per task
        spread: Distance between class means in units of the noise std
        seed: Generator seed; the same seed gives identical data

    Returns:
        Tasks named ``syn<i>``
    """
    if min(n_tasks, dims, classes_per_task, train_samples, test_samples) < 1:
        raise ConfigError("synthetic task counts must all be positive")
    if classes_per_task > dims:
        raise ConfigError(f"{classes_per_task} orthogonal class means need at least as many dims, got {dims}")
    if spread < 0:
        raise ConfigError(f"spread must be non-negative, got {spread}")

    tasks = []
    for task_id in range(n_tasks):
        rng = np.random.default_rng([seed, task_id])
        directions, _ = np.linalg.qr(rng.normal(size=(dims, classes_per_task)))
        means = (spread / math.sqrt(2.0)) * directions.T

        def draw(count: int, split: str) -> Dataset:
            labels = rng.permutation(np.arange(count) % classes_per_task)
            features = means[labels] + rng.normal(size=(count, dims))
            return Dataset(features, labels, split, classes_per_task)

        train = draw(train_samples, "train")
        test = draw(test_samples, "test")
        tasks.append(TaskSpec(
            task_id=task_id,
            name=f"syn{task_id}",
            kind="synthetic",
            train_source=train,
            test_source=test,
            num_classes=classes_per_task,
            classes=tuple(range(classes_per_task)),
        ))
    logger.debug(f"Generated {n_tasks} synthetic tasks (dims={dims}, spread={spread}, seed={seed})")
    return tasks


def shuffle_orders(
    tasks: Sequence[TaskSpec],
    n_orders: int,
    seed: int,
    exhaustive: bool = False,
    unique: bool = False,
    pin_first: bool = False,
) -> List[TaskSequence]:
    """
    Generate task orders for a robustness experiment.

    Args:
        tasks: Task set; ``tasks[0]`` is the pinned task in pinned-first mode
        n_orders: Number of orders to draw (ignored in exhaustive mode)
        seed: Master seed of the order generator
        exhaustive: Enumerate every permutation in lexicographic order
        unique: Draw ``n_orders`` distinct permutations
        pin_first: Keep ``tasks[0]`` at the first position of every order

    Returns:
        Sequences with ``order_id`` 0..count-1
    """
    if not tasks:
        raise ConfigError("cannot order an empty task set")
    if n_orders < 1 and not exhaustive:
        raise ConfigError(f"orders must be positive, got {n_orders}")

    head = [0] if pin_first else []
    rest = list(range(1 if pin_first else 0, len(tasks)))
    total = math.factorial(len(rest))

    if exhaustive:
        perms = [head + list(p) for p in itertools.permutations(rest)]
    else:
        if unique and n_orders > total:
            raise ConfigError(f"{n_orders} unique orders requested but only {total} exist")
        rng = np.random.default_rng(np.random.SeedSequence([seed, ORDER_SEED_SALT]))
        perms, seen = [], set()
        while len(perms) < n_orders:
            perm = head + [rest[i] for i in rng.permutation(len(rest))]
            if unique and tuple(perm) in seen:
                continue
            seen.add(tuple(perm))
            perms.append(perm)

    sequences = [
        TaskSequence(order_id=order_id, tasks=[tasks[i] for i in perm], seed=seed)
        for order_id, perm in enumerate(perms)
    ]
    logger.info(f"Generated {len(sequences)} task orders over {len(tasks)} tasks")
    return sequences
