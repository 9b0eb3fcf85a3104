from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from .nn import Parameter

logger = logging.getLogger(__name__)


def global_norm(params: Sequence[Parameter]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params)))


class Adam:
    """Adam with bias correction and global-norm gradient clipping.

    A parameter whose gradient is exactly zero everywhere keeps its data; its
    moments still decay as in standard Adam.
    """

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip: float | None = 100.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip = clip
        self.skipped = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> bool:
        """Apply one update. Returns False if the step was skipped."""
        if not all(np.all(np.isfinite(p.grad)) for p in self.params):
            self.skipped += 1
            logger.warning("non-finite gradient; Adam step skipped (%d so far)", self.skipped)
            return False
        scale = 1.0
        if self.clip is not None:
            norm = global_norm(self.params)
            if norm > self.clip:
                scale = self.clip / norm
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps, scale)
        return True


def adam_step(params: Sequence[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps_hat: float = 1e-8, grad_scale: float = 1.0) -> None:
    for p in params:
        g = p.grad if grad_scale == 1.0 else p.grad * p.grad.dtype.type(grad_scale)
        p.step_count += 1
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        if not np.any(g):
            continue
        m_hat = p.adam_m / (1.0 - beta1 ** p.step_count)
        v_hat = p.adam_v / (1.0 - beta2 ** p.step_count)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps_hat)).astype(p.data.dtype)
