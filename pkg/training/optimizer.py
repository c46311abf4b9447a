import logging
from typing import Mapping, Union

import numpy as np

from core.errors import NonFiniteGradientError
from core.model import ModelParams
from core.numerics import DualTensor

logger = logging.getLogger(__name__)

Registry = Union[ModelParams, Mapping[str, DualTensor]]


class Adam:
    """Adam with bias correction. Moments are keyed by parameter name."""

    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Registry) -> None:
        """Apply one update from the accumulated grads, then zero them."""
        items = list(params.items())
        # no parameter moves unless every grad is finite
        for name, p in items:
            if not np.all(np.isfinite(p.grad)):
                logger.error(f"[ADAM] Non-finite gradient in '{name}' at t={self.t + 1}")
                raise NonFiniteGradientError(name)

        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t

        for name, p in items:
            g = p.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)
            p.zero_grad()

    def load_state(self, t: int, m: Mapping[str, np.ndarray], v: Mapping[str, np.ndarray]) -> None:
        self.t = t
        self.m = {k: np.array(a, dtype=np.float64) for k, a in m.items()}
        self.v = {k: np.array(a, dtype=np.float64) for k, a in v.items()}
