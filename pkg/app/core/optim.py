"""Adam optimizer over parameter dictionaries keyed by stable ids."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Tuple

import numpy as np

from app.errors import ContractError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First/second moments per parameter plus the bias-correction step counter."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Dict[str, np.ndarray], ids: Iterable[str] = None, **hyper) -> "AdamState":
        """Create zero moments for the selected parameter ids (all of them by default)."""
        ids = list(params) if ids is None else list(ids)
        return cls(
            m={pid: np.zeros_like(params[pid]) for pid in ids},
            v={pid: np.zeros_like(params[pid]) for pid in ids},
            **hyper,
        )


def adam_step(
    params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """Apply one bias-corrected Adam update in place.

    Only the parameters tracked by ``state`` are updated; ``grads`` must carry
    exactly those ids and ``params`` must contain them.

    Args:
        params: Parameter arrays keyed by id (updated in place)
        grads: Gradient arrays keyed by id
        state: Optimizer state (moments updated in place, step incremented by 1)

    Returns:
        Tuple of (params, state)
    """
    tracked = set(state.m)
    if set(grads) != tracked or not tracked.issubset(params):
        missing = tracked.symmetric_difference(grads) | (tracked - set(params))
        raise ContractError(f"Adam key sets differ: {sorted(missing)}")

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for pid in sorted(tracked):
        g = grads[pid]
        m = state.m[pid]
        v = state.v[pid]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        params[pid] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state
