"""Training hyper-parameters."""

import logging
from dataclasses import asdict, dataclass
from typing import Dict

from app.errors import ConfigError
from app.importance.neuron_importance import DEFAULT_EPSILON, MERGE_POLICIES

logger = logging.getLogger(__name__)

IMPORTANCE_METHODS = ("ours", "mean", "ewc", "si", "mas", "none")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and regularization settings shared by every task of a run.

    ``method`` picks the importance measure: ``ours`` (mean / (std + epsilon)
    per neuron), ``mean`` (mean activation only), the weight-level ``ewc``,
    ``si`` and ``mas`` baselines, or ``none`` for plain fine-tuning.
    """

    alpha: float = 0.0045
    epochs: int = 40
    batch_size: int = 256
    lr: float = 0.001
    seed: int = 0
    reinit: bool = True
    merge_policy: str = "max"
    epsilon: float = DEFAULT_EPSILON
    method: str = "ours"
    si_damping: float = 0.1
    importance_samples: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    save_checkpoints: bool = False
    export_importance: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.si_damping <= 0:
            raise ConfigError(f"si_damping must be positive, got {self.si_damping}")
        if self.importance_samples < 0:
            raise ConfigError(f"importance_samples must be >= 0, got {self.importance_samples}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.merge_policy not in MERGE_POLICIES:
            raise ConfigError(f"unknown merge_policy {self.merge_policy!r} (expected one of {MERGE_POLICIES})")
        if self.method not in IMPORTANCE_METHODS:
            raise ConfigError(f"unknown method {self.method!r} (expected one of {IMPORTANCE_METHODS})")

    @property
    def regularized(self) -> bool:
        return self.method != "none" and self.alpha > 0

    def to_dict(self) -> Dict:
        return asdict(self)
