"""Finite-difference verification of every backward pass and of the penalized loss."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
from tabulate import tabulate

from app.core import functional as F
from app.importance.neuron_importance import ImportanceMap
from app.network.config import NetworkConfig
from app.network.multihead import MultiHeadNetwork
from app.training.config import TrainConfig
from app.training.trainer import TrainerState, total_loss

logger = logging.getLogger(__name__)

TOLERANCE = 1e-5
STEP = 1e-6
OPS = ("dense", "relu", "conv2d", "maxpool", "gap", "softmax_ce", "penalized_loss")


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    while not it.finished:
        idx = it.multi_index
        original = x[idx]
        x[idx] = original + h
        plus = f()
        x[idx] = original - h
        minus = f()
        x[idx] = original
        grad[idx] = (plus - minus) / (2 * h)
        it.iternext()
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ||a - n|| / max(||a|| + ||n||, 1e-12)."""
    diff = np.linalg.norm(analytic - numeric)
    return float(diff / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12))


@dataclass
class GradcheckResult:
    op: str
    max_rel_error: float
    checked: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < TOLERANCE)


@dataclass
class GradcheckReport:
    results: List[GradcheckResult]

    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.results)

    def __getitem__(self, op: str) -> GradcheckResult:
        for result in self.results:
            if result.op == op:
                return result
        raise KeyError(op)

    def to_table(self) -> str:
        rows = [
            [r.op, ", ".join(r.checked), f"{r.max_rel_error:.3e}", "PASS" if r.passed else "FAIL"]
            for r in self.results
        ]
        return tabulate(rows, headers=["op", "gradients", "max rel error", "status"], tablefmt="github")


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.1) -> np.ndarray:
    values = rng.uniform(margin, 1.0, size=shape)
    return values * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng: np.random.Generator, shape) -> np.ndarray:
    """Values at least 0.01 apart, so no max-pool window has a tie."""
    size = int(np.prod(shape))
    return (rng.permutation(size) * 0.01 - size * 0.005).reshape(shape)


class _Checker:
    def __init__(self, rng: np.random.Generator, corrupt: Optional[str]):
        self.rng = rng
        self.corrupt = corrupt

    def compare(self, op: str, pairs: Dict[str, tuple]) -> GradcheckResult:
        """``pairs`` maps a gradient name to (analytic, numeric)."""
        worst = 0.0
        for analytic, numeric in pairs.values():
            if op == self.corrupt:
                analytic = analytic * 1.01 + 1e-3
            worst = max(worst, relative_error(analytic, numeric))
        return GradcheckResult(op, worst, list(pairs))

    def dense(self) -> GradcheckResult:
        x, w, b = self.rng.normal(size=(4, 5)), self.rng.normal(size=(5, 3)), self.rng.normal(size=3)
        dy = self.rng.normal(size=(4, 3))
        f = lambda: float(np.sum(F.dense_forward(x, w, b) * dy))
        dx, dw, db = F.dense_backward(dy, x, w)
        return self.compare("dense", {
            "x": (dx, numeric_gradient(f, x)),
            "w": (dw, numeric_gradient(f, w)),
            "b": (db, numeric_gradient(f, b)),
        })

    def relu(self) -> GradcheckResult:
        x = _away_from_zero(self.rng, (4, 6))
        dy = self.rng.normal(size=x.shape)
        f = lambda: float(np.sum(F.relu(x) * dy))
        return self.compare("relu", {"x": (F.relu_backward(dy, x), numeric_gradient(f, x))})

    def conv2d(self) -> GradcheckResult:
        pairs = {}
        for stride, padding in ((1, 1), (2, 0)):
            x = self.rng.normal(size=(2, 2, 5, 5))
            k = self.rng.normal(size=(3, 2, 3, 3))
            b = self.rng.normal(size=3)
            dy = self.rng.normal(size=F.conv2d_forward(x, k, b, stride, padding).shape)
            f = lambda: float(np.sum(F.conv2d_forward(x, k, b, stride, padding) * dy))
            dx, dk, db = F.conv2d_backward(dy, x, k, stride, padding)
            tag = f"s{stride}p{padding}"
            pairs[f"x[{tag}]"] = (dx, numeric_gradient(f, x))
            pairs[f"k[{tag}]"] = (dk, numeric_gradient(f, k))
            pairs[f"b[{tag}]"] = (db, numeric_gradient(f, b))
        return self.compare("conv2d", pairs)

    def maxpool(self) -> GradcheckResult:
        x = _distinct(self.rng, (2, 2, 4, 5))
        out, index = F.max_pool2d_forward(x, 2)
        dy = self.rng.normal(size=out.shape)
        f = lambda: float(np.sum(F.max_pool2d_forward(x, 2)[0] * dy))
        dx = F.max_pool2d_backward(dy, index, x.shape, 2)
        return self.compare("maxpool", {"x": (dx, numeric_gradient(f, x))})

    def gap(self) -> GradcheckResult:
        x = self.rng.normal(size=(2, 3, 4, 4))
        dy = self.rng.normal(size=(2, 3))
        f = lambda: float(np.sum(F.global_avg_pool(x) * dy))
        return self.compare("gap", {"x": (F.global_avg_pool_backward(dy, x.shape), numeric_gradient(f, x))})

    def softmax_ce(self) -> GradcheckResult:
        logits = self.rng.normal(size=(5, 4))
        labels = self.rng.integers(0, 4, size=5)
        _, dlogits = F.softmax_cross_entropy(logits, labels)
        f = lambda: F.softmax_cross_entropy(logits, labels)[0]
        return self.compare("softmax_ce", {"logits": (dlogits, numeric_gradient(f, logits))})

    def penalized_loss(self) -> GradcheckResult:
        config = NetworkConfig(kind="mlp", input_shape=(4,), hidden=(6, 5), classes_per_head=3,
                               seed=int(self.rng.integers(2 ** 31)))
        net = MultiHeadNetwork(config).add_head("task")
        # With zero biases, a unit whose inputs are all zero sits exactly on the ReLU kink.
        for pid in net.trainable_ids("task"):
            if pid.endswith(".bias"):
                net.params[pid] = self.rng.uniform(0.1, 0.5, size=net.params[pid].shape)
        trunk = net.trunk_param_ids
        anchors = {pid: net.params[pid] + self.rng.normal(scale=0.1, size=net.params[pid].shape) for pid in trunk}
        importance = ImportanceMap(
            params={pid: self.rng.uniform(0.1, 2.0, size=net.params[pid].shape) for pid in trunk}
        )
        state = TrainerState(network=net, anchors=anchors, importance=importance)
        train = TrainConfig(alpha=0.7, epochs=1)
        x = self.rng.normal(size=(6, 4))
        y = self.rng.integers(0, 3, size=6)

        grads = total_loss(state, x, y, "task", train).grads
        f = lambda: total_loss(state, x, y, "task", train).loss
        return self.compare("penalized_loss", {
            pid: (grads[pid], numeric_gradient(f, net.params[pid])) for pid in net.trainable_ids("task")
        })


def run_gradcheck(seed: int = 0, corrupt: Optional[str] = None) -> GradcheckReport:
    """
    Compare analytic and central-difference gradients for every op.

    Args:
        seed: Seed of the random test inputs
        corrupt: Name of an op whose analytic gradient is deliberately perturbed

    Returns:
        Report with the maximum relative error per op
    """
    checker = _Checker(np.random.default_rng(seed), corrupt)
    results = [getattr(checker, op)() for op in OPS]
    report = GradcheckReport(results)
    for result in results:
        log = logger.info if result.passed else logger.error
        log(f"gradcheck {result.op}: max relative error {result.max_rel_error:.3e}")
    return report
