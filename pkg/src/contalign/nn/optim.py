"""Adam optimizer with bias correction."""

from __future__ import annotations

import numpy as np

from .autograd import Parameter

__all__ = ["Adam"]


class Adam:
    """Standard Adam. Moments live on the parameters themselves and are
    initialized to zero on first use; updates are deterministic given
    identical gradients."""

    def __init__(self, params: list[Parameter], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p in self.params:
            if p.grad is None:
                continue
            if p.adam_m is None:
                p.adam_m = np.zeros_like(p.data)
                p.adam_v = np.zeros_like(p.data)
            g = p.grad
            p.adam_m = b1 * p.adam_m + (1.0 - b1) * g
            p.adam_v = b2 * p.adam_v + (1.0 - b2) * (g * g)
            m_hat = p.adam_m / bias1
            v_hat = p.adam_v / bias2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
