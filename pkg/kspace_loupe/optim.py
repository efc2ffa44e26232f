"""
Adam over a :class:`ParamStore`, one shared state for every parameter group.
"""

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional
import logging

import numpy as np

from .autodiff import ParamStore
from .types import KspaceLoupeError

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


class OptimizerError(KspaceLoupeError):
    """Raised for non-finite or mismatched gradients"""
    pass


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: ParamStore) -> "AdamState":
        return cls(m={n: np.zeros_like(p) for n, p in params.items()},
                   v={n: np.zeros_like(p) for n, p in params.items()})


def adam_step(params: ParamStore, grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, group_lr: Optional[Mapping[str, float]] = None) -> None:
    """Bias-corrected Adam update, in place.

    ``group_lr`` maps a name prefix (e.g. ``"pattern."``) to its own learning rate.
    All gradients are checked before any parameter changes.
    """
    for name in params.names():
        if name not in grads:
            raise OptimizerError(f"Missing gradient for {name}")
        g = grads[name]
        if g.shape != params[name].shape:
            raise OptimizerError(f"Gradient shape {g.shape} does not match {name} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"Non-finite gradient for {name}")

    state.t += 1
    bias1 = 1.0 - BETA1 ** state.t
    bias2 = 1.0 - BETA2 ** state.t
    for name in params.names():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        step_lr = _lr_for(name, lr, group_lr)
        params.set(name, params[name] - step_lr * (m / bias1) / (np.sqrt(v / bias2) + EPSILON))


def _lr_for(name: str, lr: float, group_lr: Optional[Mapping[str, float]]) -> float:
    for prefix, value in (group_lr or {}).items():
        if name.startswith(prefix):
            return value
    return lr
