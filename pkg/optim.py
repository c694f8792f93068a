"""Adam with per-parameter learning-rate scaling."""

import logging
from collections.abc import Iterable
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GradientMissingError
from .tensor import Parameter

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Moments, step counter and hyperparameters of an Adam optimizer.

    Moments are keyed by parameter name and created as zeros the first time a
    parameter is stepped, so a fresh state behaves as t = 0 for every entry.
    """

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")

    def effective_lr(self, param: Parameter) -> float:
        return self.lr * param.lr_scale


def adam_step(params: Iterable[Parameter], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place.

    Each parameter moves independently, at ``state.lr * param.lr_scale``.

    Args:
        params: Parameters whose ``value.grad`` has been populated.
        state: Optimizer state; its step counter advances by one.

    Raises:
        GradientMissingError: Some parameter has no gradient. Nothing is updated.
    """
    params = list(params)
    missing = [p.name for p in params if p.value.grad is None]
    if missing:
        raise GradientMissingError(f"no gradient for: {', '.join(missing)}")

    state.t += 1
    bias1 = 1.0 - state.beta1 ** state.t
    bias2 = 1.0 - state.beta2 ** state.t
    for p in params:
        grad = p.value.grad
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.value.data)
            state.v[p.name] = np.zeros_like(p.value.data)
        m = state.m[p.name]
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * (grad * grad)
        m_hat = m / bias1
        v_hat = v / bias2
        p.value.data -= state.effective_lr(p) * m_hat / (np.sqrt(v_hat) + state.eps)
